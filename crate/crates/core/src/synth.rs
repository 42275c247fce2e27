//! Procedural face-like video clips with plantable forgery artifacts.
//!
//! Every clip is a pure function of its seed. The seed fixes the background,
//! face geometry, motion and sensor noise; the label only decides whether the
//! artifact is drawn on top, so a real and a fake clip with the same seed
//! differ only inside the artifact region (for flicker and warp).

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_list, parse_value, render_list, KvSection};
use crate::error::{CastError, Result};
use crate::preprocess::{write_clip, FrameClip, Label, Manifest, ManifestRecord, NormalizationSpec, Split};
use crate::seed::{label_hash, mix};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SNAPSHOT_FILE: &str = "synth.cfg";

/// Frame rate recorded in generated clips; every frame is kept.
const SYNTH_FPS: f64 = 25.0;
const NOISE_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    None,
    TextureSeam,
    Flicker,
    Warp,
    Combined,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::None => "none",
            ArtifactKind::TextureSeam => "texture_seam",
            ArtifactKind::Flicker => "flicker",
            ArtifactKind::Warp => "warp",
            ArtifactKind::Combined => "combined",
        }
    }

    fn flickers(self) -> bool {
        matches!(self, ArtifactKind::Flicker | ArtifactKind::Combined)
    }

    fn warps(self) -> bool {
        matches!(self, ArtifactKind::Warp | ArtifactKind::Combined)
    }

    fn seams(self) -> bool {
        matches!(self, ArtifactKind::TextureSeam | ArtifactKind::Combined)
    }
}

impl FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "none" => ArtifactKind::None,
            "texture_seam" => ArtifactKind::TextureSeam,
            "flicker" => ArtifactKind::Flicker,
            "warp" => ArtifactKind::Warp,
            "combined" => ArtifactKind::Combined,
            _ => return Err(format!("unknown artifact kind `{s}`")),
        })
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundStyle {
    SmoothGradient,
    Blotchy,
}

impl BackgroundStyle {
    pub fn name(self) -> &'static str {
        match self {
            BackgroundStyle::SmoothGradient => "smooth_gradient",
            BackgroundStyle::Blotchy => "blotchy",
        }
    }
}

impl FromStr for BackgroundStyle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "smooth_gradient" => Ok(BackgroundStyle::SmoothGradient),
            "blotchy" => Ok(BackgroundStyle::Blotchy),
            _ => Err(format!("unknown background style `{s}`")),
        }
    }
}

impl fmt::Display for BackgroundStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned rectangle in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    /// The eye band of a centered face.
    pub const EYES: Region = Region { x0: 0.25, y0: 0.28, x1: 0.75, y1: 0.46 };

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(self.x0) && inside(self.x1) && inside(self.y0) && inside(self.y1)) || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(CastError::InvalidRegion(self.to_string()));
        }
        Ok(())
    }

    /// Pixel bounds `(row0, row1, col0, col1)`, half-open.
    pub fn pixels(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        self.validate()?;
        let r0 = (self.y0 * h as f64).floor() as usize;
        let r1 = ((self.y1 * h as f64).ceil() as usize).min(h);
        let c0 = (self.x0 * w as f64).floor() as usize;
        let c1 = ((self.x1 * w as f64).ceil() as usize).min(w);
        if r0 >= r1 || c0 >= c1 {
            return Err(CastError::InvalidRegion(format!("{self} covers no pixel of a {h}x{w} frame")));
        }
        Ok((r0, r1, c0, c1))
    }

    /// Moves the region by `(dx, dy)`, sliding it back inside the unit square.
    pub fn translated(&self, dx: f64, dy: f64) -> Region {
        let shift = |lo: f64, hi: f64, d: f64| {
            let d = d.clamp(-lo, 1.0 - hi);
            (lo + d, hi + d)
        };
        let (x0, x1) = shift(self.x0, self.x1, dx);
        let (y0, y1) = shift(self.y0, self.y1, dy);
        Region { x0, y0, x1, y1 }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<f64> = parse_list(s)?;
        match v[..] {
            [x0, y0, x1, y1] => Ok(Region { x0, y0, x1, y1 }),
            _ => Err(format!("region needs four numbers x0,y0,x1,y1, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub amplitude: f64,
    pub region: Region,
    /// Frames per flicker/warp cycle.
    pub temporal_period: usize,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self { kind: ArtifactKind::Flicker, amplitude: 0.25, region: Region::EYES, temporal_period: 2 }
    }
}

impl ArtifactSpec {
    pub fn none() -> Self {
        Self { kind: ArtifactKind::None, amplitude: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(CastError::config(format!("artifact amplitude must be >= 0, got {}", self.amplitude)));
        }
        if self.kind == ArtifactKind::None && self.amplitude != 0.0 {
            return Err(CastError::config("artifact kind `none` requires amplitude 0"));
        }
        if self.temporal_period < 1 {
            return Err(CastError::config("temporal period must be at least 1"));
        }
        self.region.validate()
    }

    /// Square wave in `{+1, -1}`: first half of each period positive.
    fn phase_sign(&self, t: usize, phase: usize) -> f64 {
        let p = self.temporal_period;
        if 2 * ((t + phase) % p) < p {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub fake_fraction: f64,
    pub base_seed: u64,
    pub artifact: ArtifactSpec,
    pub background_style: BackgroundStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_val: 100,
            n_test: 200,
            frames: 16,
            h: 32,
            w: 32,
            fake_fraction: 0.5,
            base_seed: 0,
            artifact: ArtifactSpec::default(),
            background_style: BackgroundStyle::SmoothGradient,
        }
    }
}

impl SynthConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

impl KvSection for SynthConfig {
    const NAME: &'static str = "synth";

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "n_train" => self.n_train = parse_value(value)?,
            "n_val" => self.n_val = parse_value(value)?,
            "n_test" => self.n_test = parse_value(value)?,
            "frames" => self.frames = parse_value(value)?,
            "height" => self.h = parse_value(value)?,
            "width" => self.w = parse_value(value)?,
            "fake_fraction" => self.fake_fraction = parse_value(value)?,
            "seed" => self.base_seed = parse_value(value)?,
            "artifact" => self.artifact.kind = value.parse()?,
            "amplitude" => self.artifact.amplitude = parse_value(value)?,
            "region" => self.artifact.region = value.parse()?,
            "period" => self.artifact.temporal_period = parse_value(value)?,
            "background" => self.background_style = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let r = self.artifact.region;
        vec![
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.h.to_string()),
            ("width", self.w.to_string()),
            ("fake_fraction", self.fake_fraction.to_string()),
            ("seed", self.base_seed.to_string()),
            ("artifact", self.artifact.kind.to_string()),
            ("amplitude", self.artifact.amplitude.to_string()),
            ("region", render_list(&[r.x0, r.y0, r.x1, r.y1])),
            ("period", self.artifact.temporal_period.to_string()),
            ("background", self.background_style.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_val < 1 || self.n_test < 1 {
            return Err(CastError::config("every split needs at least one clip"));
        }
        if self.frames < 2 {
            return Err(CastError::config("clips need at least two frames"));
        }
        if self.h < 1 || self.w < 1 {
            return Err(CastError::config("frame size must be positive"));
        }
        if !(self.fake_fraction > 0.0 && self.fake_fraction < 1.0) {
            return Err(CastError::config(format!("fake_fraction must be in (0, 1), got {}", self.fake_fraction)));
        }
        self.artifact.validate()
    }
}

/// Distribution shift applied by [`shifted_variant`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub amplitude_scale: f64,
    pub background_style: Option<BackgroundStyle>,
    /// Region translation, in normalized units along both axes.
    pub region_jitter: f64,
}

impl Default for Shift {
    fn default() -> Self {
        Self { amplitude_scale: 1.0, background_style: None, region_jitter: 0.0 }
    }
}

impl Shift {
    pub fn is_identity(&self, cfg: &SynthConfig) -> bool {
        self.amplitude_scale == 1.0
            && self.background_style.is_none_or(|b| b == cfg.background_style)
            && self.region_jitter == 0.0
    }
}

/// A config producing a distribution-shifted dataset: scaled artifact
/// strength, optionally a different background and a moved artifact region,
/// drawn from a fresh seed namespace. The identity shift returns `cfg` as is.
pub fn shifted_variant(cfg: &SynthConfig, shift: &Shift) -> Result<SynthConfig> {
    if !(shift.amplitude_scale > 0.0 && shift.amplitude_scale.is_finite()) {
        return Err(CastError::config(format!("amplitude_scale must be positive, got {}", shift.amplitude_scale)));
    }
    if shift.is_identity(cfg) {
        return Ok(cfg.clone());
    }
    let mut out = cfg.clone();
    out.artifact.amplitude *= shift.amplitude_scale;
    if let Some(b) = shift.background_style {
        out.background_style = b;
    }
    out.artifact.region = cfg.artifact.region.translated(shift.region_jitter, shift.region_jitter);
    out.base_seed = mix(cfg.base_seed, label_hash("shifted"));
    Ok(out)
}

// ---- procedural scene -------------------------------------------------------

struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: [f64; 3],
}

/// Everything that depends on the seed alone.
struct Scene {
    bg_style: BackgroundStyle,
    bg_lo: [f64; 3],
    bg_hi: [f64; 3],
    bg_angle: f64,
    blobs: Vec<Blob>,
    skin: [f64; 3],
    feature: [f64; 3],
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_dy: f64,
    eye_r: f64,
    mouth_dy: f64,
    mouth_rx: f64,
    mouth_ry: f64,
    sway: (f64, f64),
    sway_period: f64,
    sway_phase: f64,
    light_amp: f64,
    light_period: f64,
    light_phase: f64,
    artifact_phase: usize,
    seam_parity: usize,
}

impl Scene {
    fn draw(seed: u64, style: BackgroundStyle) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
        let rgb = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let bg_lo = rgb(0.28, 0.4, &mut rng);
        // ranges keep a ±0.25 artifact clear of the [0, 1] clamp
        let bg_hi = rgb(0.45, 0.65, &mut rng);
        let bg_angle = rng.random_range(0.0..2.0 * PI);
        let n_blobs = if style == BackgroundStyle::Blotchy { 7 } else { 0 };
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                cx: rng.random_range(0.0..1.0),
                cy: rng.random_range(0.0..1.0),
                sigma: rng.random_range(0.05..0.15),
                amp: rgb(-0.35, 0.35, &mut rng),
            })
            .collect();
        let skin_base = rng.random_range(0.45..0.58);
        let skin = [skin_base + 0.08, skin_base, skin_base - 0.06];
        let feature = rgb(0.28, 0.38, &mut rng);
        Self {
            bg_style: style,
            bg_lo,
            bg_hi,
            bg_angle,
            blobs,
            skin,
            feature,
            cx: rng.random_range(0.46..0.54),
            cy: rng.random_range(0.48..0.54),
            rx: rng.random_range(0.26..0.32),
            ry: rng.random_range(0.34..0.40),
            eye_dx: rng.random_range(0.11..0.14),
            eye_dy: rng.random_range(0.12..0.15),
            eye_r: rng.random_range(0.045..0.06),
            mouth_dy: rng.random_range(0.16..0.2),
            mouth_rx: rng.random_range(0.08..0.12),
            mouth_ry: rng.random_range(0.025..0.035),
            sway: (rng.random_range(0.01..0.03), rng.random_range(0.005..0.02)),
            sway_period: rng.random_range(10.0..24.0),
            sway_phase: rng.random_range(0.0..2.0 * PI),
            light_amp: rng.random_range(0.0..0.04),
            light_period: rng.random_range(12.0..32.0),
            light_phase: rng.random_range(0.0..2.0 * PI),
            artifact_phase: rng.random_range(0..64),
            seam_parity: rng.random_range(0..2),
        }
    }

    fn background(&self, u: f64, v: f64, c: usize) -> f64 {
        let s = 0.5 + 0.5 * ((u - 0.5) * self.bg_angle.cos() + (v - 0.5) * self.bg_angle.sin()) * std::f64::consts::SQRT_2;
        let mut value = self.bg_lo[c] + (self.bg_hi[c] - self.bg_lo[c]) * s.clamp(0.0, 1.0);
        if self.bg_style == BackgroundStyle::Blotchy {
            for b in &self.blobs {
                let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
                value += b.amp[c] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            value += 0.12 * ((u * 23.0 + v * 7.0).sin() * (v * 19.0 - u * 5.0).cos());
        }
        value
    }

    /// Noise-free pixel value at normalized coordinates `(u, v)` in frame `t`.
    fn pixel(&self, u: f64, v: f64, t: usize, c: usize) -> f64 {
        let angle = 2.0 * PI * t as f64 / self.sway_period + self.sway_phase;
        let cx = self.cx + self.sway.0 * angle.sin();
        let cy = self.cy + self.sway.1 * angle.cos();
        let r2 = ((u - cx) / self.rx).powi(2) + ((v - cy) / self.ry).powi(2);
        // soft-edged oval
        let face = (1.0 - smoothstep(0.85, 1.15, r2)).clamp(0.0, 1.0);
        let mut value = self.background(u, v, c) * (1.0 - face) + self.skin[c] * face;
        let ey = cy - self.eye_dy;
        let mut feature = 0.0f64;
        for ex in [cx - self.eye_dx, cx + self.eye_dx] {
            let d2 = ((u - ex).powi(2) + (v - ey).powi(2)) / (self.eye_r * self.eye_r);
            feature = feature.max((-d2).exp());
        }
        let md2 = ((u - cx) / self.mouth_rx).powi(2) + ((v - cy - self.mouth_dy) / self.mouth_ry).powi(2);
        feature = feature.max((-md2).exp());
        value = value * (1.0 - feature) + self.feature[c] * feature;
        let light = 1.0 + self.light_amp * (2.0 * PI * t as f64 / self.light_period + self.light_phase).sin();
        value * light
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let s = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Renders raw `[frames, 3, h, w]` pixels in `[0, 1]`.
pub fn render_frames(
    seed: u64,
    label: Label,
    spec: &ArtifactSpec,
    frames: usize,
    h: usize,
    w: usize,
    background: BackgroundStyle,
) -> Result<Tensor> {
    spec.validate()?;
    if frames < 2 {
        return Err(CastError::config(format!("clips need at least two frames, got {frames}")));
    }
    let (r0, r1, c0, c1) = spec.region.pixels(h, w)?;
    let scene = Scene::draw(seed, background);
    let fake = label == Label::Fake && spec.amplitude > 0.0;
    let noise = Normal::new(0.0, NOISE_SD).expect("valid noise sd");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    let mut data = Vec::with_capacity(frames * 3 * h * w);
    let region_h = (r1 - r0) as f64 / h as f64;
    for t in 0..frames {
        let sign = spec.phase_sign(t, scene.artifact_phase);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut u = (x as f64 + 0.5) / w as f64;
                    let mut v = (y as f64 + 0.5) / h as f64;
                    let inside = (r0..r1).contains(&y) && (c0..c1).contains(&x);
                    if fake && inside && spec.kind.warps() {
                        // sample the scene from a displaced location
                        v += sign * spec.amplitude * region_h;
                        u += sign * spec.amplitude * region_h * 0.5;
                    }
                    let mut value = scene.pixel(u, v, t, c);
                    if fake && inside {
                        if spec.kind.flickers() {
                            value += sign * spec.amplitude;
                        }
                        let border = y == r0 || y + 1 == r1 || x == c0 || x + 1 == c1;
                        if spec.kind.seams() && border {
                            let checker = if (x + y + scene.seam_parity).is_multiple_of(2) { 1.0 } else { -1.0 };
                            value += checker * spec.amplitude;
                        }
                    }
                    data.push(value + noise.sample(&mut noise_rng));
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[frames, 3, h, w], data)
}

/// One normalized synthetic clip.
pub fn generate_clip(seed: u64, label: Label, spec: &ArtifactSpec, frames: usize, h: usize, w: usize) -> Result<FrameClip> {
    generate_clip_styled(seed, label, spec, frames, h, w, BackgroundStyle::SmoothGradient, &format!("synth-{seed:016x}"))
}

#[allow(clippy::too_many_arguments)]
pub fn generate_clip_styled(
    seed: u64,
    label: Label,
    spec: &ArtifactSpec,
    frames: usize,
    h: usize,
    w: usize,
    background: BackgroundStyle,
    source_id: &str,
) -> Result<FrameClip> {
    let raw = render_frames(seed, label, spec, frames, h, w, background)?;
    let norm = NormalizationSpec::IMAGENET;
    let plane = h * w;
    let mut data = raw.into_data();
    for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
        let c = i % 3;
        chunk.iter_mut().for_each(|v| *v = (*v - norm.mean[c]) / norm.std[c]);
    }
    let frames_t = Tensor::from_vec(&[frames, 3, h, w], data)?.cast::<f32>();
    let mut clip = FrameClip::new(frames_t, Some(label), source_id)?;
    clip.f_orig = SYNTH_FPS;
    clip.r = SYNTH_FPS;
    Ok(clip)
}

/// Seed of clip `index` in `split`: the base seed xor a hash of the pair.
pub fn clip_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    base_seed ^ mix(label_hash(split.name()), index as u64)
}

/// Label of clip `index` in a split: fakes are spread so that the first `n`
/// clips always hold `floor(n · fake_fraction)` fakes.
pub fn clip_label(index: usize, fake_fraction: f64) -> Label {
    let before = (index as f64 * fake_fraction).floor();
    let after = ((index + 1) as f64 * fake_fraction).floor();
    if after > before {
        Label::Fake
    } else {
        Label::Real
    }
}

/// Writes every clip, the manifest and a config snapshot under `out_dir`.
/// Clip `index` of `split` exactly as [`generate_dataset`] writes it.
pub fn dataset_clip(cfg: &SynthConfig, split: Split, index: usize) -> Result<FrameClip> {
    let label = clip_label(index, cfg.fake_fraction);
    let seed = clip_seed(cfg.base_seed, split, index);
    let source_id = format!("{split}-{index:05}-{seed:016x}");
    generate_clip_styled(seed, label, &cfg.artifact, cfg.frames, cfg.h, cfg.w, cfg.background_style, &source_id)
}

/// Every clip of one split, in index order, without touching disk.
pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Vec<FrameClip>> {
    cfg.validate()?;
    (0..cfg.count(split)).map(|i| dataset_clip(cfg, split, i)).collect()
}

pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut records = Vec::new();
    for split in Split::ALL {
        let dir = out_dir.join(split.name());
        std::fs::create_dir_all(&dir)?;
        for index in 0..cfg.count(split) {
            let clip = dataset_clip(cfg, split, index)?;
            let rel = PathBuf::from(split.name()).join(format!("{index:05}.clip"));
            write_clip(&out_dir.join(&rel), &clip)?;
            records.push(ManifestRecord { path: rel, label: clip.label, split });
        }
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    crate::codec::write_atomic(&out_dir.join(SNAPSHOT_FILE), cfg.render().as_bytes())?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_balanced_in_every_prefix() {
        for ff in [0.5, 0.3, 0.25, 0.9] {
            for n in 1..60 {
                let fakes = (0..n).filter(|&i| clip_label(i, ff) == Label::Fake).count();
                assert_eq!(fakes as f64, (n as f64 * ff).floor(), "ff {ff} n {n}");
            }
        }
    }

    #[test]
    fn region_pixels() {
        assert_eq!(Region::EYES.pixels(32, 32).unwrap(), (8, 15, 8, 24));
        let thin = Region { x0: 0.5, y0: 0.5, x1: 0.5001, y1: 0.5001 };
        assert_eq!(thin.pixels(4, 4).unwrap(), (2, 3, 2, 3));
        assert!(Region { x0: 0.5, y0: 0.0, x1: 1.2, y1: 0.5 }.validate().is_err());
        let moved = Region::EYES.translated(0.4, -0.5);
        assert!((moved.x1 - 1.0).abs() < 1e-12 && moved.y0 == 0.0);
    }

    #[test]
    fn config_round_trips() {
        let cfg = SynthConfig { base_seed: 7, background_style: BackgroundStyle::Blotchy, ..SynthConfig::default() };
        assert_eq!(SynthConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}
