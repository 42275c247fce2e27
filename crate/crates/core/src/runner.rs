//! Experiment configuration and the commands behind the `cast` binary:
//! dataset generation, training, evaluation, the variant ablation and
//! attention heatmaps.
//!
//! A config file holds `[synth]`, `[model]`, `[training]`, `[eval]`,
//! `[output]` and `[ablate]` sections; any may be omitted. Relative paths are
//! resolved against the directory holding the config file.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::write_atomic;
use crate::config::{parse_list, parse_sections, parse_value, render_list, KvSection};
use crate::error::{CastError, Result};
use crate::model::{read_checkpoint_config, CastConfig, CastModel, EvalLogitMode, Variant};
use crate::preprocess::{read_clip, FrameClip, Manifest, Split};
use crate::seed::{fnv1a, FNV_OFFSET};
use crate::synth::{generate_dataset, generate_split, shifted_variant, BackgroundStyle, Shift, SynthConfig, MANIFEST_FILE};
use crate::tensor::{DType, Real};
use crate::train::{evaluate_clips, load_clips, train, train_from_manifest, EpochRecord, EvalReport, TrainConfig};

pub const ABLATION_TABLE: &str = "ablation.tsv";
pub const ABLATION_LOG: &str = "ablation.log";

/// Process exit status for an error: 2 config/input, 3 divergence,
/// 4 checkpoint mismatch, 5 unsupported variant.
pub fn exit_code(err: &CastError) -> u8 {
    match err {
        CastError::Divergence(_) | CastError::NumericalFailure(_) => 3,
        CastError::CheckpointMismatch(_) => 4,
        CastError::UnsupportedVariant(_) => 5,
        _ => 2,
    }
}

/// Which clips of a manifest `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSplit {
    /// The test split when the manifest has one, otherwise every clip.
    #[default]
    Auto,
    All,
    Only(Split),
}

impl EvalSplit {
    pub fn resolve(self, manifest: &Manifest) -> Option<Split> {
        match self {
            EvalSplit::Auto => manifest.has_split(Split::Test).then_some(Split::Test),
            EvalSplit::All => None,
            EvalSplit::Only(s) => Some(s),
        }
    }
}

impl FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(EvalSplit::Auto),
            "all" => Ok(EvalSplit::All),
            other => other.parse().map(EvalSplit::Only).map_err(|e: CastError| e.to_string()),
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalSplit::Auto => f.write_str("auto"),
            EvalSplit::All => f.write_str("all"),
            EvalSplit::Only(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSection {
    /// Defaults to `<output>/data/manifest.tsv`.
    pub manifest: Option<PathBuf>,
    /// Defaults to `<output>/train/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub mode: EvalLogitMode,
    pub split: EvalSplit,
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl KvSection for EvalSection {
    const NAME: &'static str = "eval";

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "manifest" => self.manifest = parse_opt_path(value),
            "checkpoint" => self.checkpoint = parse_opt_path(value),
            "mode" => self.mode = parse_value(value)?,
            "split" => self.split = parse_value(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("manifest", opt_path(&self.manifest)),
            ("checkpoint", opt_path(&self.checkpoint)),
            ("mode", self.mode.to_string()),
            ("split", self.split.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl KvSection for OutputSection {
    const NAME: &'static str = "output";

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "dir" if value.is_empty() => return Err("output dir must not be empty".into()),
            "dir" => self.dir = PathBuf::from(value),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![("dir", self.dir.display().to_string())]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Replaces `[training] max_epochs` for ablation runs.
    pub max_epochs: usize,
    pub shift_amplitude: f64,
    pub shift_background: Option<BackgroundStyle>,
    pub shift_jitter: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            max_epochs: 5,
            shift_amplitude: 0.5,
            shift_background: Some(BackgroundStyle::Blotchy),
            shift_jitter: 0.05,
        }
    }
}

impl AblateSection {
    pub fn shift(&self) -> Shift {
        Shift {
            amplitude_scale: self.shift_amplitude,
            background_style: self.shift_background,
            region_jitter: self.shift_jitter,
        }
    }
}

impl KvSection for AblateSection {
    const NAME: &'static str = "ablate";

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "variants" => self.variants = parse_list(value)?,
            "seeds" => self.seeds = parse_list(value)?,
            "max_epochs" => self.max_epochs = parse_value(value)?,
            "shift_amplitude" => self.shift_amplitude = parse_value(value)?,
            "shift_background" => {
                self.shift_background = if value == "keep" { None } else { Some(parse_value(value)?) }
            }
            "shift_jitter" => self.shift_jitter = parse_value(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variants", render_list(&self.variants)),
            ("seeds", render_list(&self.seeds)),
            ("max_epochs", self.max_epochs.to_string()),
            ("shift_amplitude", self.shift_amplitude.to_string()),
            ("shift_background", self.shift_background.map_or_else(|| "keep".to_string(), |b| b.to_string())),
            ("shift_jitter", self.shift_jitter.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(CastError::config("ablation needs at least one variant and one seed"));
        }
        if self.max_epochs == 0 {
            return Err(CastError::config("ablation max_epochs must be positive"));
        }
        if !(self.shift_amplitude > 0.0) {
            return Err(CastError::config("shift_amplitude must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: CastConfig,
    pub training: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
    pub ablate: AblateSection,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: CastConfig::default(),
            training: TrainConfig::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
            ablate: AblateSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self { base_dir: base_dir.to_path_buf(), ..Self::default() };
        for sec in parse_sections(text)? {
            match sec.name.as_str() {
                "synth" => cfg.synth.apply(&sec.entries)?,
                "model" => cfg.model.apply(&sec.entries)?,
                "training" => cfg.training.apply(&sec.entries)?,
                "eval" => cfg.eval.apply(&sec.entries)?,
                "output" => cfg.output.apply(&sec.entries)?,
                "ablate" => cfg.ablate.apply(&sec.entries)?,
                "" => {
                    return Err(CastError::ConfigParse {
                        line: sec.entries[0].line,
                        msg: format!("key `{}` outside any section", sec.entries[0].key),
                    })
                }
                other => return Err(CastError::ConfigParse { line: sec.line, msg: format!("unknown section [{other}]") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CastError::MissingInput(path.to_path_buf()),
            _ => CastError::Io(e),
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.ablate.validate()?;
        let (s, m) = (&self.synth, &self.model);
        if (s.frames, s.h, s.w) != (m.clip_len, m.height, m.width) {
            return Err(CastError::config(format!(
                "[synth] makes {}x{}x{} clips but [model] expects {}x{}x{}",
                s.frames, s.h, s.w, m.clip_len, m.height, m.width
            )));
        }
        Ok(())
    }

    /// Canonical text; parsing it back gives an equal config.
    pub fn render(&self) -> String {
        [
            self.synth.render(),
            self.model.render(),
            self.training.render(),
            self.eval.render(),
            self.output.render(),
            self.ablate.render(),
        ]
        .join("\n")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir().join("data")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.eval.manifest.as_deref().map_or_else(|| self.data_dir().join(MANIFEST_FILE), |p| self.resolve(p))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir().join("train")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .as_deref()
            .map_or_else(|| self.train_dir().join(crate::train::CHECKPOINT_FILE), |p| self.resolve(p))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir().join("eval")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.out_dir().join("ablate")
    }
}

// ---- gen / train / eval -----------------------------------------------------

/// Writes the synthetic dataset into `dir` and returns the manifest path.
pub fn cmd_gen(synth: &SynthConfig, dir: &Path, out: &mut dyn Write) -> Result<PathBuf> {
    generate_dataset(synth, dir)?;
    let path = dir.join(MANIFEST_FILE);
    writeln!(out, "{}", path.display())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

/// Trains on a manifest's train/val splits; checkpoint and history go to `dir`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    manifest: &Path,
    dir: &Path,
    out: &mut dyn Write,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let manifest = Manifest::read(manifest)?;
    let mut progress = |r: &EpochRecord| {
        let _ = writeln!(
            log,
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_auc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_auc
        );
    };
    let (best_epoch, best_val_loss, checkpoint, history) = match cfg.model.precision {
        DType::F32 => {
            let o = train_from_manifest::<f32>(&cfg.model, &manifest, &cfg.training, dir, &mut progress)?;
            (o.best_epoch, o.best_val_loss, o.checkpoint, o.history_path)
        }
        DType::F64 => {
            let o = train_from_manifest::<f64>(&cfg.model, &manifest, &cfg.training, dir, &mut progress)?;
            (o.best_epoch, o.best_val_loss, o.checkpoint, o.history_path)
        }
    };
    writeln!(out, "best epoch {best_epoch} val_loss {best_val_loss:.6}")?;
    writeln!(out, "checkpoint {}", checkpoint.display())?;
    Ok(TrainSummary { best_epoch, best_val_loss, checkpoint, history })
}

fn missing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CastError::MissingInput(path.to_path_buf()))
    }
}

/// Scores a manifest with a checkpoint, writes the report files into
/// `out_dir` and prints accuracy and AUC.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    mode: EvalLogitMode,
    split: EvalSplit,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    missing(checkpoint)?;
    let manifest = Manifest::read(manifest)?;
    let clips = load_clips(&manifest, split.resolve(&manifest))?;
    let report = match read_checkpoint_config(checkpoint)?.precision {
        DType::F32 => evaluate_clips(&CastModel::<f32>::load(checkpoint)?, &clips, mode)?,
        DType::F64 => evaluate_clips(&CastModel::<f64>::load(checkpoint)?, &clips, mode)?,
    };
    report.write(out_dir)?;
    writeln!(out, "ACC {:.4}", report.accuracy())?;
    writeln!(out, "AUC {:.4}", report.auc())?;
    Ok(report)
}

// ---- ablation ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// AUC on the in-distribution test split.
    pub test_auc: f64,
    /// AUC on the shifted test set.
    pub shifted_auc: f64,
}

#[derive(Debug)]
pub struct AblateFailure {
    pub variant: Variant,
    pub seed: u64,
    pub error: CastError,
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub rows: Vec<AblationRow>,
    pub failures: Vec<AblateFailure>,
    pub table: PathBuf,
    /// Checksum of every clip the runs consumed.
    pub data_checksum: u64,
}

impl AblateOutcome {
    /// Mean `(test_auc, shifted_auc)` of one variant over its completed seeds.
    pub fn mean(&self, variant: Variant) -> Option<(f64, f64)> {
        mean_of(&self.rows, variant)
    }
}

fn mean_of(rows: &[AblationRow], variant: Variant) -> Option<(f64, f64)> {
    let own: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
    if own.is_empty() {
        return None;
    }
    let n = own.len() as f64;
    Some((own.iter().map(|r| r.test_auc).sum::<f64>() / n, own.iter().map(|r| r.shifted_auc).sum::<f64>() / n))
}

/// Tab-separated table sorted by variant name then seed, one mean row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut rows: Vec<&AblationRow> = rows.iter().collect();
    rows.sort_by(|a, b| a.variant.name().cmp(b.variant.name()).then(a.seed.cmp(&b.seed)));
    let mut s = String::from("variant\tseed\ttest_auc\tshifted_auc\n");
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", r.variant, r.seed, r.test_auc, r.shifted_auc));
        if rows.get(i + 1).is_none_or(|next| next.variant != r.variant) {
            let all: Vec<AblationRow> = rows.iter().map(|r| (*r).clone()).collect();
            let (t, sh) = mean_of(&all, r.variant).expect("variant has rows");
            s.push_str(&format!("{}\tmean\t{t:.6}\t{sh:.6}\n", r.variant));
        }
    }
    s
}

pub fn clips_checksum(sets: &[&[FrameClip]]) -> u64 {
    sets.iter().flat_map(|s| s.iter()).fold(FNV_OFFSET, |h, c| fnv1a(h, &c.to_bytes()))
}

struct AblationData {
    train: Vec<FrameClip>,
    val: Vec<FrameClip>,
    test: Vec<FrameClip>,
    shifted: Vec<FrameClip>,
}

fn ablation_run<T: Real>(
    model: &CastConfig,
    training: &TrainConfig,
    mode: EvalLogitMode,
    data: &AblationData,
    dir: &Path,
) -> Result<(f64, f64)> {
    let out = train::<T>(model, &data.train, &data.val, training, dir, &mut |_| {})?;
    let test = evaluate_clips(&out.best, &data.test, mode)?;
    let shifted = evaluate_clips(&out.best, &data.shifted, mode)?;
    test.write(&dir.join("test"))?;
    shifted.write(&dir.join("shifted"))?;
    Ok((test.auc(), shifted.auc()))
}

/// Trains every configured variant for every seed on the same data and
/// scores each on the in-distribution and the shifted test sets. A failing
/// run is recorded and the rest still run; the table always holds the
/// completed rows. Everything is written under `dir`.
pub fn cmd_ablate(cfg: &ExperimentConfig, dir: &Path, out: &mut dyn Write, log: &mut dyn Write) -> Result<AblateOutcome> {
    std::fs::create_dir_all(dir)?;
    let shifted_cfg = shifted_variant(&cfg.synth, &cfg.ablate.shift())?;
    let data = AblationData {
        train: generate_split(&cfg.synth, Split::Train)?,
        val: generate_split(&cfg.synth, Split::Val)?,
        test: generate_split(&cfg.synth, Split::Test)?,
        shifted: generate_split(&shifted_cfg, Split::Test)?,
    };
    let mut variants = cfg.ablate.variants.clone();
    variants.sort_by_key(|v| v.name());
    variants.dedup();
    let mut seeds = cfg.ablate.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let table = dir.join(ABLATION_TABLE);
    let mut log_text = format!("shifted synth config:\n{}\n", shifted_cfg.render());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut data_checksum = 0;
    for &variant in &variants {
        for &seed in &seeds {
            let checksum = clips_checksum(&[&data.train, &data.val, &data.test, &data.shifted]);
            data_checksum = checksum;
            let line = format!("{variant}\tseed {seed}\tdata {checksum:016x}");
            writeln!(log, "{line}")?;
            log_text.push_str(&line);
            log_text.push('\n');
            let model = CastConfig { variant, ..cfg.model.clone() };
            let training = TrainConfig { seed, max_epochs: cfg.ablate.max_epochs, ..cfg.training.clone() };
            let run_dir = dir.join(variant.name()).join(format!("seed{seed}"));
            let result = match model.precision {
                DType::F32 => ablation_run::<f32>(&model, &training, cfg.eval.mode, &data, &run_dir),
                DType::F64 => ablation_run::<f64>(&model, &training, cfg.eval.mode, &data, &run_dir),
            };
            let line = match result {
                Ok((test_auc, shifted_auc)) => {
                    rows.push(AblationRow { variant, seed, test_auc, shifted_auc });
                    format!("{variant}\tseed {seed}\ttest_auc {test_auc:.6}\tshifted_auc {shifted_auc:.6}")
                }
                Err(error) => {
                    let line = format!("{variant}\tseed {seed}\tFAILED: {error}");
                    failures.push(AblateFailure { variant, seed, error });
                    line
                }
            };
            writeln!(log, "{line}")?;
            log_text.push_str(&line);
            log_text.push('\n');
            write_atomic(&table, ablation_table(&rows).as_bytes())?;
            write_atomic(&dir.join(ABLATION_LOG), log_text.as_bytes())?;
        }
    }
    write!(out, "{}", ablation_table(&rows))?;
    for f in &failures {
        writeln!(out, "FAILED {}\tseed {}\t{}", f.variant, f.seed, f.error)?;
    }
    Ok(AblateOutcome { rows, failures, table, data_checksum })
}

// ---- heatmaps ---------------------------------------------------------------

/// Min-max scales one attention row over its `grid` cells to 0..=255 and
/// upsamples it (nearest) to `size`. A constant row maps to 128 everywhere.
pub fn heatmap_pixels(row: &[f64], grid: (usize, usize), size: (usize, usize)) -> Result<Vec<u8>> {
    let (gh, gw) = grid;
    let (h, w) = size;
    if row.len() != gh * gw || gh == 0 || gw == 0 {
        return Err(CastError::shape(format!("attention row of {} for a {gh}x{gw} grid", row.len())));
    }
    if h % gh != 0 || w % gw != 0 {
        return Err(CastError::shape(format!("{h}x{w} image is not a multiple of the {gh}x{gw} grid")));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(CastError::NumericalFailure("non-finite attention weight".into()));
    }
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cells: Vec<u8> = if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        vec![128; row.len()]
    } else {
        row.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    };
    let (fy, fx) = (h / gh, w / gw);
    Ok((0..h * w).map(|i| cells[(i / w / fy) * gw + (i % w) / fx]).collect())
}

/// Binary greyscale PGM (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a `P5` image with maxval 255, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(CastError::format("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(CastError::format(format!("not an 8-bit P5 image (magic {}, maxval {})", fields[0], fields[3])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| CastError::format(format!("bad PGM dimension `{s}`")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    // exactly one whitespace byte separates the header from the raster
    let body = bytes.get(i + 1..).unwrap_or_default();
    if body.len() != w * h {
        return Err(CastError::format(format!("PGM raster has {} bytes, header says {}", body.len(), w * h)));
    }
    Ok((w, h, body.to_vec()))
}

fn attention_row<T: Real>(checkpoint: &Path, clip: &Path, frame: usize) -> Result<(CastConfig, Vec<f64>)> {
    let model = CastModel::<T>::load(checkpoint)?;
    let cfg = model.config.clone();
    if !cfg.variant.has_attention() {
        return Err(CastError::UnsupportedVariant(cfg.variant.to_string()));
    }
    let clip = read_clip(clip)?;
    model.check_clip(&clip).map_err(|e| CastError::CheckpointMismatch(e.to_string()))?;
    if frame >= cfg.clip_len {
        return Err(CastError::config(format!("frame {frame} is out of range for {}-frame clips", cfg.clip_len)));
    }
    let a = model.forward(&clip)?.attention.ok_or_else(|| CastError::UnsupportedVariant(cfg.variant.to_string()))?;
    let row = a.index_first(frame)?.to_f64_vec();
    Ok((cfg, row))
}

/// Writes the attention of temporal token `frame` over the spatial grid as a
/// PGM at the clip's resolution.
pub fn cmd_heatmap(checkpoint: &Path, clip: &Path, frame: usize, out_path: &Path) -> Result<()> {
    missing(checkpoint)?;
    let (cfg, row) = match read_checkpoint_config(checkpoint)?.precision {
        DType::F32 => attention_row::<f32>(checkpoint, clip, frame)?,
        DType::F64 => attention_row::<f64>(checkpoint, clip, frame)?,
    };
    let pixels = heatmap_pixels(&row, cfg.feature_hw(), (cfg.height, cfg.width))?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(out_path, &encode_pgm(cfg.width, cfg.height, &pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.ablate.seeds = vec![4];
        cfg.ablate.shift_background = None;
        cfg.eval.manifest = Some(PathBuf::from("data/m.tsv"));
        cfg.eval.split = EvalSplit::Only(Split::Val);
        let back = ExperimentConfig::parse(&cfg.render(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn table_is_sorted_with_means() {
        let row = |variant, seed, t| AblationRow { variant, seed, test_auc: t, shifted_auc: t / 2.0 };
        let rows = vec![row(Variant::Full, 1, 0.8), row(Variant::DecoupledSelfAttention, 0, 1.0), row(Variant::Full, 0, 0.6)];
        let text = ablation_table(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "decoupled_self_attention\t0\t1.000000\t0.500000");
        assert_eq!(lines[2], "decoupled_self_attention\tmean\t1.000000\t0.500000");
        assert_eq!(lines[3], "full\t0\t0.600000\t0.300000");
        assert_eq!(lines[5], "full\tmean\t0.700000\t0.350000");
    }
}
