//! The CAST video classifier: a small convolutional backbone, per-frame
//! temporal tokens refined by a transformer encoder, spatial tokens averaged
//! over time, cross-attention fusion and a linear head.
//!
//! Ablation variants swap out the fusion block or the token construction; see
//! [`Variant`].

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{write_atomic, Reader};
use crate::config::{parse_list, parse_value, render_list, KvSection};
use crate::error::{CastError, Result};
use crate::nn::{self, Conv2dParams, Ctx, LayerNormParams, Linear, MhsaParams, Mode};
use crate::params::{Bound, ParamSet};
use crate::preprocess::FrameClip;
use crate::tensor::{DType, Graph, Real, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CASTCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
const POS_EMBED_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Temporal tokens query time-averaged spatial tokens.
    Full,
    /// Fusion removed: the encoder output goes straight to the head.
    NoCrossAttention,
    /// Independent self-attention on each stream, then concatenation.
    DecoupledSelfAttention,
    /// Spatial tokens query the temporal tokens.
    ReversedQkv,
    /// Keys/values built from every backbone stage.
    MultiScale,
    /// Spatial tokens are raw backbone channels (requires `d = C`).
    NoProjection,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCrossAttention,
        Variant::DecoupledSelfAttention,
        Variant::ReversedQkv,
        Variant::MultiScale,
        Variant::NoProjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::DecoupledSelfAttention => "decoupled_self_attention",
            Variant::ReversedQkv => "reversed_qkv",
            Variant::MultiScale => "multi_scale",
            Variant::NoProjection => "no_projection",
        }
    }

    /// Whether the variant produces a temporal-to-spatial attention map.
    pub fn has_attention(self) -> bool {
        !matches!(self, Variant::NoCrossAttention | Variant::DecoupledSelfAttention)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a video-level score is read off the model at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalLogitMode {
    /// `sigmoid(clip_logit)`.
    Clip,
    /// Mean of per-frame sigmoids.
    #[default]
    FrameMean,
}

impl EvalLogitMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalLogitMode::Clip => "clip",
            EvalLogitMode::FrameMean => "frame_mean",
        }
    }
}

impl FromStr for EvalLogitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clip" => Ok(EvalLogitMode::Clip),
            "frame_mean" => Ok(EvalLogitMode::FrameMean),
            _ => Err(format!("unknown eval logit mode `{s}` (expected clip or frame_mean)")),
        }
    }
}

impl fmt::Display for EvalLogitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CastConfig {
    /// Output channels of each stride-2 3×3 conv stage.
    pub channels: Vec<usize>,
    pub d: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `4·d`.
    pub ffn_dim: Option<usize>,
    pub fusion_heads: usize,
    pub dropout: f64,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub variant: Variant,
    pub eval_logit_mode: EvalLogitMode,
    pub precision: DType,
}

impl Default for CastConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            d: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_dim: None,
            fusion_heads: 4,
            dropout: 0.3,
            clip_len: 16,
            height: 32,
            width: 32,
            variant: Variant::Full,
            eval_logit_mode: EvalLogitMode::FrameMean,
            precision: DType::F64,
        }
    }
}

impl CastConfig {
    /// Backbone output channels `C`.
    pub fn backbone_channels(&self) -> usize {
        *self.channels.last().expect("validated config has stages")
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d)
    }

    /// Final feature-map size `(H', W')`.
    pub fn feature_hw(&self) -> (usize, usize) {
        let f = 1 << self.channels.len();
        (self.height / f, self.width / f)
    }

    /// Spatial tokens per frame, `H'·W'`.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.feature_hw();
        h * w
    }

    /// Width of the per-site features fed to the spatial projection.
    fn spatial_in(&self) -> usize {
        match self.variant {
            Variant::MultiScale => self.channels.iter().sum(),
            _ => self.backbone_channels(),
        }
    }
}

impl KvSection for CastConfig {
    const NAME: &'static str = "model";

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "channels" => self.channels = parse_list(value)?,
            "d" => self.d = parse_value(value)?,
            "encoder_layers" => self.encoder_layers = parse_value(value)?,
            "heads" => self.heads = parse_value(value)?,
            "ffn_dim" => self.ffn_dim = if value == "auto" { None } else { Some(parse_value(value)?) },
            "fusion_heads" => self.fusion_heads = parse_value(value)?,
            "dropout" => self.dropout = parse_value(value)?,
            "clip_len" => self.clip_len = parse_value(value)?,
            "height" => self.height = parse_value(value)?,
            "width" => self.width = parse_value(value)?,
            "variant" => self.variant = value.parse()?,
            "eval_logit_mode" => self.eval_logit_mode = value.parse()?,
            "precision" => {
                self.precision = DType::parse(value).ok_or_else(|| format!("unknown precision `{value}` (f32 or f64)"))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", render_list(&self.channels)),
            ("d", self.d.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.map_or("auto".to_string(), |v| v.to_string())),
            ("fusion_heads", self.fusion_heads.to_string()),
            ("dropout", self.dropout.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("variant", self.variant.to_string()),
            ("eval_logit_mode", self.eval_logit_mode.to_string()),
            ("precision", self.precision.name().to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CastError::ConfigError(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return err(format!("backbone channels must be non-empty and positive, got {:?}", self.channels));
        }
        if self.d == 0 || self.heads == 0 || self.fusion_heads == 0 || self.clip_len == 0 || self.ffn() == 0 {
            return err("d, heads, fusion_heads, ffn_dim and clip_len must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) || !self.d.is_multiple_of(self.fusion_heads) {
            return err(format!("d = {} must be divisible by heads {} and fusion_heads {}", self.d, self.heads, self.fusion_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let f = 1usize << self.channels.len();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return err(format!(
                "{}x{} frames are not divisible by {f} ({} stride-2 stages)",
                self.height,
                self.width,
                self.channels.len()
            ));
        }
        if self.variant == Variant::NoProjection && self.d != self.backbone_channels() {
            return err(format!("no_projection requires d ({}) = backbone channels ({})", self.d, self.backbone_channels()));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars<T: Real> {
    /// Shape `[1]`.
    pub clip_logit: Var,
    /// Shape `[F]`.
    pub frame_logits: Var,
    /// Shape `[F, d]`.
    pub fused: Var,
    /// Shape `[d]`.
    pub pooled: Var,
    /// Shape `[F, d]`, the encoder output.
    pub temporal: Var,
    /// Head-averaged `[F, H'·W']` attention, when the variant defines one.
    pub attention: Option<Tensor<T>>,
}

/// Fusion result before the classifier.
#[derive(Debug, Clone)]
pub struct Fusion<T: Real> {
    pub fused: Var,
    /// The attended update added to the temporal tokens, before dropout.
    pub update: Option<Var>,
    pub attention: Option<Tensor<T>>,
}

/// Plain-tensor view of one clip's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T: Real = f64> {
    pub clip_logit: T,
    pub frame_logits: Tensor<T>,
    pub attention: Option<Tensor<T>>,
    pub fused_tokens: Tensor<T>,
    pub pooled: Tensor<T>,
}

impl<T: Real> ModelOutput<T> {
    /// Video score in `[0, 1]` under the given read-out.
    pub fn score(&self, mode: EvalLogitMode) -> f64 {
        let sig = |z: f64| if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
        match mode {
            EvalLogitMode::Clip => sig(self.clip_logit.f64()),
            EvalLogitMode::FrameMean => {
                let f = self.frame_logits.data();
                f.iter().map(|z| sig(z.f64())).sum::<f64>() / f.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CastModel<T: Real = f64> {
    pub config: CastConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> CastModel<T> {
    /// Fresh parameters: Xavier-uniform weights, zero biases, unit layer-norm
    /// gains and small gaussian positional embeddings.
    pub fn init(config: CastConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != T::DTYPE {
            return Err(CastError::config(format!(
                "config asks for {} but the model is {}",
                config.precision.name(),
                T::DTYPE.name()
            )));
        }
        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut c_in = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            nn::init_conv(&mut set, &format!("backbone.{i}"), c_in, c, 3, &mut rng)?;
            c_in = c;
        }
        let c = cfg.backbone_channels();
        let d = cfg.d;
        if cfg.variant != Variant::NoProjection {
            nn::init_linear(&mut set, "spatial_proj", cfg.spatial_in(), d, &mut rng)?;
        }
        nn::init_linear(&mut set, "temporal_proj", c, d, &mut rng)?;
        let normal = Normal::new(0.0, POS_EMBED_SD).expect("valid sd");
        let pos: Vec<T> = (0..cfg.clip_len * d).map(|_| T::c(normal.sample(&mut rng))).collect();
        set.insert("pos_embed", Tensor::from_vec(&[cfg.clip_len, d], pos)?)?;
        for l in 0..cfg.encoder_layers {
            let p = format!("encoder.{l}");
            nn::init_layer_norm(&mut set, &format!("{p}.ln1"), d)?;
            nn::init_mhsa(&mut set, &format!("{p}.attn"), d, cfg.heads, &mut rng)?;
            nn::init_layer_norm(&mut set, &format!("{p}.ln2"), d)?;
            nn::init_linear(&mut set, &format!("{p}.ffn1"), d, cfg.ffn(), &mut rng)?;
            nn::init_linear(&mut set, &format!("{p}.ffn2"), cfg.ffn(), d, &mut rng)?;
        }
        match cfg.variant {
            Variant::NoCrossAttention => {}
            Variant::DecoupledSelfAttention => {
                nn::init_mhsa(&mut set, "fusion.temporal_attn", d, cfg.fusion_heads, &mut rng)?;
                nn::init_mhsa(&mut set, "fusion.spatial_attn", d, cfg.fusion_heads, &mut rng)?;
                nn::init_linear(&mut set, "fusion.merge", 2 * d, d, &mut rng)?;
                nn::init_layer_norm(&mut set, "fusion.ln", d)?;
            }
            _ => {
                nn::init_mhsa(&mut set, "fusion.attn", d, cfg.fusion_heads, &mut rng)?;
                nn::init_layer_norm(&mut set, "fusion.ln", d)?;
            }
        }
        nn::init_linear(&mut set, "classifier", d, 1, &mut rng)?;
        Ok(Self { config, params: set })
    }

    /// Binds the parameters onto `g` as trainable leaves.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>) -> BoundModel<'a, T> {
        BoundModel { cfg: &self.config, bound: self.params.bind(g) }
    }

    /// Binds the parameters as constants (no gradient bookkeeping).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<T>) -> BoundModel<'a, T> {
        BoundModel { cfg: &self.config, bound: self.params.bind_frozen(g) }
    }

    /// Clip frames as a graph constant in the model's precision.
    pub fn clip_input(&self, g: &mut Graph<T>, clip: &FrameClip) -> Result<Var> {
        self.check_clip(clip)?;
        Ok(g.constant(clip.frames.cast::<T>()))
    }

    pub fn check_clip(&self, clip: &FrameClip) -> Result<()> {
        let want = [self.config.clip_len, 3, self.config.height, self.config.width];
        if clip.frames.shape() != want {
            return Err(CastError::config(format!(
                "clip {} has shape {:?}, model expects {want:?}",
                clip.source_id,
                clip.frames.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass on one clip with dropout disabled.
    pub fn forward(&self, clip: &FrameClip) -> Result<ModelOutput<T>> {
        self.forward_with(clip, &mut Ctx::eval())
    }

    pub fn forward_with(&self, clip: &FrameClip, ctx: &mut Ctx) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let m = self.bind_frozen(&mut g);
        let x = self.clip_input(&mut g, clip)?;
        let out = m.forward(&mut g, x, ctx)?;
        Ok(out.read(&g))
    }

    // ---- checkpoints --------------------------------------------------------

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = self.config.render();
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(header.as_bytes())?;
        for (name, t) in self.params.iter() {
            crate::codec::put_string_u16(out, name)?;
            t.write_to(out)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Reads a checkpoint, checking every entry against the shapes its own
    /// config implies.
    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CastError::format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header = String::from_utf8(r.bytes(len)?).map_err(|_| CastError::format("checkpoint header is not UTF-8"))?;
        let config = CastConfig::parse(&header).map_err(|e| CastError::format(format!("checkpoint header: {e}")))?;
        if config.precision != T::DTYPE {
            return Err(CastError::CheckpointMismatch(format!(
                "checkpoint holds {} parameters, {} requested",
                config.precision.name(),
                T::DTYPE.name()
            )));
        }
        let template = Self::init(config.clone(), 0)?;
        let mut params = ParamSet::new();
        while let Some(first) = r.at_eof()? {
            let rest = r.u8()?;
            let len = u16::from_le_bytes([first, rest]) as usize;
            let name = String::from_utf8(r.bytes(len)?).map_err(|_| CastError::format("parameter name is not UTF-8"))?;
            let t = Tensor::<T>::read_with(&mut r)?;
            let want = template
                .params
                .get(&name)
                .ok_or_else(|| CastError::CheckpointMismatch(format!("unexpected parameter `{name}`")))?;
            if want.shape() != t.shape() {
                return Err(CastError::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            params.insert(name, t).map_err(|_| CastError::format("duplicate parameter entry"))?;
        }
        if let Some(missing) = template.params.names().find(|n| !params.contains(n)) {
            return Err(CastError::CheckpointMismatch(format!("missing parameter `{missing}`")));
        }
        // keep the canonical order regardless of file order
        let mut ordered = ParamSet::new();
        for name in template.params.names() {
            ordered.insert(name, params.get(name).expect("checked above").clone())?;
        }
        Ok(Self { config, params: ordered })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CastError::MissingInput(path.to_path_buf()),
            _ => CastError::Io(e),
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Reads only the config block of a checkpoint file.
pub fn read_checkpoint_config(path: &Path) -> Result<CastConfig> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CastError::MissingInput(path.to_path_buf()),
        _ => CastError::Io(e),
    })?;
    let mut r = Reader::new(std::io::BufReader::new(file), "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CastError::format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header = String::from_utf8(r.bytes(len)?).map_err(|_| CastError::format("checkpoint header is not UTF-8"))?;
    CastConfig::parse(&header).map_err(|e| CastError::format(format!("checkpoint header: {e}")))
}

impl<T: Real> ForwardVars<T> {
    pub fn read(&self, g: &Graph<T>) -> ModelOutput<T> {
        ModelOutput {
            clip_logit: g.value(self.clip_logit).data()[0],
            frame_logits: g.value(self.frame_logits).clone(),
            attention: self.attention.clone(),
            fused_tokens: g.value(self.fused).clone(),
            pooled: g.value(self.pooled).clone(),
        }
    }
}

/// Model parameters bound onto one graph; each stage of the forward pass is a
/// method so it can be exercised on its own.
pub struct BoundModel<'a, T: Real> {
    pub cfg: &'a CastConfig,
    pub bound: Bound<'a, T>,
}

impl<T: Real> BoundModel<'_, T> {
    fn linear(&self, prefix: &str) -> Result<Linear> {
        Linear::bind(&self.bound, prefix)
    }

    /// Conv stages on `[F, 3, H, W]`; returns every stage's `[F, C_i, H_i, W_i]` output.
    pub fn backbone(&self, g: &mut Graph<T>, frames: Var) -> Result<Vec<Var>> {
        let s = g.shape(frames).to_vec();
        let f = 1usize << self.cfg.channels.len();
        match s[..] {
            [_, 3, h, w] if h % f == 0 && w % f == 0 => {}
            _ => return Err(CastError::config(format!("backbone input {s:?} must be [F, 3, H, W] with H, W divisible by {f}"))),
        }
        let mut x = frames;
        let mut stages = Vec::with_capacity(self.cfg.channels.len());
        for i in 0..self.cfg.channels.len() {
            let p = Conv2dParams::bind(&self.bound, &format!("backbone.{i}"), 2, 1)?;
            let y = nn::conv2d(g, x, &p)?;
            x = g.relu(y)?;
            stages.push(x);
        }
        Ok(stages)
    }

    /// `[F, H'·W', d]` tokens from the backbone stages (row-major grid order).
    pub fn spatial_tokens(&self, g: &mut Graph<T>, stages: &[Var]) -> Result<Var> {
        let last = *stages.last().ok_or_else(|| CastError::shape("no backbone stages"))?;
        let s = g.shape(last).to_vec();
        let (frames, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let tokens = hh * ww;
        let sites = match self.cfg.variant {
            Variant::NoProjection => {
                let raw = nn::channels_last(g, last)?;
                return g.reshape(raw, &[frames, tokens, c]);
            }
            Variant::MultiScale => {
                let mut parts = Vec::with_capacity(stages.len());
                for &st in stages {
                    let factor = g.shape(st)[2] / hh;
                    let pooled = g.avg_pool2d(st, factor)?;
                    parts.push(nn::channels_last(g, pooled)?);
                }
                g.concat_last(&parts)?
            }
            _ => nn::channels_last(g, last)?,
        };
        let y = nn::linear(g, sites, &self.linear("spatial_proj")?)?;
        g.reshape(y, &[frames, tokens, self.cfg.d])
    }

    /// `[F, d]`: global average pool per frame, then the temporal projection.
    pub fn temporal_tokens(&self, g: &mut Graph<T>, fmap: Var) -> Result<Var> {
        let pooled = nn::global_avg_pool(g, fmap)?;
        nn::linear(g, pooled, &self.linear("temporal_proj")?)
    }

    /// Adds positional embeddings and runs the pre-norm encoder stack.
    pub fn encode_temporal(&self, g: &mut Graph<T>, t_seq: Var, ctx: &mut Ctx) -> Result<Var> {
        let pos = self.bound.var("pos_embed")?;
        if g.shape(pos) != g.shape(t_seq) {
            return Err(CastError::shape(format!(
                "{:?} temporal tokens vs {:?} positional embeddings",
                g.shape(t_seq),
                g.shape(pos)
            )));
        }
        let mut x = g.add(t_seq, pos)?;
        for l in 0..self.cfg.encoder_layers {
            let p = format!("encoder.{l}");
            let ln1 = LayerNormParams::bind(&self.bound, &format!("{p}.ln1"))?;
            let attn = MhsaParams::bind(&self.bound, &format!("{p}.attn"), self.cfg.heads)?;
            let h = nn::layer_norm(g, x, &ln1)?;
            let a = nn::mhsa(g, h, &attn, ctx)?;
            x = g.add(x, a.output)?;
            let ln2 = LayerNormParams::bind(&self.bound, &format!("{p}.ln2"))?;
            let h = nn::layer_norm(g, x, &ln2)?;
            let h = nn::linear(g, h, &self.linear(&format!("{p}.ffn1"))?)?;
            let h = g.relu(h)?;
            let h = ctx.dropout(g, h)?;
            let h = nn::linear(g, h, &self.linear(&format!("{p}.ffn2"))?)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Token-wise mean over frames: `[F, N, d] -> [N, d]`.
    pub fn spatial_mean(&self, g: &mut Graph<T>, s: Var) -> Result<Var> {
        g.mean_first(s)
    }

    /// Fuses encoder output `z` (`[F, d]`) with time-averaged spatial tokens
    /// `s_mean` (`[N, d]`) according to the configured variant.
    pub fn fuse(&self, g: &mut Graph<T>, z: Var, s_mean: Var, ctx: &mut Ctx) -> Result<Fusion<T>> {
        let heads = self.cfg.fusion_heads;
        let (update, attention) = match self.cfg.variant {
            Variant::NoCrossAttention => return Ok(Fusion { fused: z, update: None, attention: None }),
            Variant::Full | Variant::MultiScale | Variant::NoProjection => {
                let p = MhsaParams::bind(&self.bound, "fusion.attn", heads)?;
                let out = nn::multi_head_attention(g, z, s_mean, &p, ctx, false)?;
                (out.output, Some(nn::head_average(g, &out.weights)))
            }
            Variant::ReversedQkv => {
                let p = MhsaParams::bind(&self.bound, "fusion.attn", heads)?;
                let out = nn::multi_head_attention(g, s_mean, z, &p, ctx, false)?;
                // head-averaged [N, F] weights, columns rescaled to sum to one
                // and transposed: each frame takes a convex mix of the
                // spatially attended rows
                let mut avg = out.weights[0];
                for &w in &out.weights[1..] {
                    avg = g.add(avg, w)?;
                }
                let avg = g.scale(avg, T::c(1.0 / heads as f64))?;
                let n = g.shape(avg)[0];
                let col_mean = g.mean_first(avg)?;
                let col_sum = g.scale(col_mean, T::c(n as f64))?;
                let log = g.log(col_sum)?;
                let neg = g.scale(log, -T::one())?;
                let inv = g.exp(neg)?;
                let normed = g.mul(avg, inv)?;
                let mix = g.transpose(normed)?;
                let update = g.matmul(mix, out.output)?;
                (update, Some(g.value(mix).clone()))
            }
            Variant::DecoupledSelfAttention => {
                let pt = MhsaParams::bind(&self.bound, "fusion.temporal_attn", heads)?;
                let ps = MhsaParams::bind(&self.bound, "fusion.spatial_attn", heads)?;
                let zt = nn::multi_head_attention(g, z, z, &pt, ctx, false)?.output;
                let ss = nn::multi_head_attention(g, s_mean, s_mean, &ps, ctx, false)?.output;
                let pooled = g.mean_first(ss)?;
                let frames = g.shape(z)[0];
                let ones = g.constant(Tensor::new(&[frames, 1], crate::tensor::Fill::Ones)?);
                let row = g.reshape(pooled, &[1, self.cfg.d])?;
                let tiled = g.matmul(ones, row)?;
                let cat = g.concat_last(&[zt, tiled])?;
                (nn::linear(g, cat, &self.linear("fusion.merge")?)?, None)
            }
        };
        let dropped = ctx.dropout(g, update)?;
        let sum = g.add(z, dropped)?;
        let ln = LayerNormParams::bind(&self.bound, "fusion.ln")?;
        let fused = nn::layer_norm(g, sum, &ln)?;
        Ok(Fusion { fused, update: Some(update), attention })
    }

    /// `(clip_logit [1], frame_logits [F], pooled [d])`.
    pub fn classify(&self, g: &mut Graph<T>, fused: Var) -> Result<(Var, Var, Var)> {
        let head = self.linear("classifier")?;
        let frames = g.shape(fused)[0];
        let pooled = g.mean_first(fused)?;
        let row = g.reshape(pooled, &[1, self.cfg.d])?;
        let clip = nn::linear(g, row, &head)?;
        let clip = g.reshape(clip, &[1])?;
        let per_frame = nn::linear(g, fused, &head)?;
        let per_frame = g.reshape(per_frame, &[frames])?;
        Ok((clip, per_frame, pooled))
    }

    /// Full pass on `[F, 3, H, W]` frames.
    pub fn forward(&self, g: &mut Graph<T>, frames: Var, ctx: &mut Ctx) -> Result<ForwardVars<T>> {
        let stages = self.backbone(g, frames)?;
        let fmap = *stages.last().expect("at least one stage");
        let s = self.spatial_tokens(g, &stages)?;
        let t_seq = self.temporal_tokens(g, fmap)?;
        let z = self.encode_temporal(g, t_seq, ctx)?;
        let s_mean = self.spatial_mean(g, s)?;
        let fusion = self.fuse(g, z, s_mean, ctx)?;
        let (clip_logit, frame_logits, pooled) = self.classify(g, fusion.fused)?;
        Ok(ForwardVars { clip_logit, frame_logits, fused: fusion.fused, pooled, temporal: z, attention: fusion.attention })
    }
}

/// Dropout context for a training step.
pub fn train_ctx(cfg: &CastConfig, seed: u64) -> Ctx {
    Ctx::new(Mode::Train, cfg.dropout, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = CastConfig { variant: Variant::MultiScale, ffn_dim: Some(96), ..CastConfig::default() };
        assert_eq!(CastConfig::parse(&cfg.render()).unwrap(), cfg);
        let bad = CastConfig { d: 30, ..CastConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CastConfig { variant: Variant::NoProjection, d: 32, heads: 4, fusion_heads: 4, ..CastConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CastConfig { height: 36, ..CastConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(CastConfig::default().feature_hw(), (4, 4));
    }

    #[test]
    fn parameter_layout_per_variant() {
        for v in Variant::ALL {
            let m = CastModel::<f64>::init(CastConfig { variant: v, ..CastConfig::default() }, 0).unwrap();
            assert_eq!(m.params.contains("spatial_proj.weight"), v != Variant::NoProjection);
            assert_eq!(m.params.contains("fusion.ln.gamma"), v != Variant::NoCrossAttention);
            assert_eq!(m.params.get("pos_embed").unwrap().shape(), &[16, 64]);
        }
        let ms = CastModel::<f64>::init(CastConfig { variant: Variant::MultiScale, ..CastConfig::default() }, 0).unwrap();
        assert_eq!(ms.params.get("spatial_proj.weight").unwrap().shape(), &[64, 112]);
        assert!(CastModel::<f32>::init(CastConfig::default(), 0).is_err());
    }
}
