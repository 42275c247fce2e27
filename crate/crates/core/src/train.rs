//! Loss, optimizer, training loop with best-validation checkpointing, and
//! video-level metrics.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::write_atomic;
use crate::config::{parse_value, KvSection};
use crate::error::{CastError, Result};
use crate::model::{CastConfig, CastModel, EvalLogitMode};
use crate::nn::{Ctx, Mode};
use crate::preprocess::{FrameClip, Label, Manifest, Split};
use crate::seed::mix;
use crate::tensor::{Graph, Real, Tensor};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";

/// Binary cross-entropy on a logit, `softplus(-z) + (1 - y)·z`, evaluated
/// without overflow for any finite `z`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub loss_scale: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 8,
            max_epochs: 25,
            loss_scale: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl KvSection for TrainConfig {
    const NAME: &'static str = "training";

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "lr" => self.lr = parse_value(value)?,
            "weight_decay" => self.weight_decay = parse_value(value)?,
            "batch_size" => self.batch_size = parse_value(value)?,
            "max_epochs" => self.max_epochs = parse_value(value)?,
            "loss_scale" => self.loss_scale = parse_value(value)?,
            "seed" => self.seed = parse_value(value)?,
            "beta1" => self.beta1 = parse_value(value)?,
            "beta2" => self.beta2 = parse_value(value)?,
            "eps" => self.eps = parse_value(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("loss_scale", self.loss_scale.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) {
            return Err(CastError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !positive(self.loss_scale) {
            return Err(CastError::config(format!("loss_scale must be positive, got {}", self.loss_scale)));
        }
        if !(self.weight_decay >= 0.0) || !positive(self.eps) {
            return Err(CastError::config("weight_decay must be >= 0 and eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CastError::config("adam betas must be in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CastError::config("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f64> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { v: zeros.clone(), m: zeros, t: 0 }
    }
}

/// One Adam update with L2 weight decay on gradients produced from a loss
/// multiplied by `cfg.loss_scale`. Returns `false` (leaving everything
/// untouched) when any unscaled gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CastError::shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(CastError::shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    let inv_scale = T::c(1.0 / cfg.loss_scale);
    if grads.iter().any(|g| g.data().iter().any(|&x| !(x * inv_scale).is_finite())) {
        return Ok(false);
    }
    state.t += 1;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let bc1 = T::one() - T::c(cfg.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::c(cfg.beta2.powi(state.t as i32));
    let (lr, wd, eps) = (T::c(cfg.lr), T::c(cfg.weight_decay), T::c(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let grad = g[j] * inv_scale + wd * *theta;
            m[j] = b1 * m[j] + (T::one() - b1) * grad;
            v[j] = b2 * v[j] + (T::one() - b2) * grad * grad;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

// ---- metrics ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub accuracy: f64,
}

/// Counts at threshold 0.5; a score of exactly 0.5 counts as fake.
pub fn accuracy(scores: &[f64], positives: &[bool]) -> Result<Confusion> {
    if scores.is_empty() {
        return Err(CastError::EmptyEval);
    }
    if scores.len() != positives.len() {
        return Err(CastError::shape(format!("{} scores vs {} labels", scores.len(), positives.len())));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(positives) {
        match (s >= 0.5, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Confusion { tp, tn, fp, fn_, accuracy: (tp + tn) as f64 / scores.len() as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    /// The area as the exact fraction `numer / denom`.
    pub auc_numer: u64,
    pub auc_denom: u64,
}

/// ROC swept over every distinct score (predict fake when `score ≥ threshold`)
/// and its trapezoid area, accumulated in integers so ties earn exactly half
/// credit.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<Roc> {
    if scores.len() != positives.len() {
        return Err(CastError::shape(format!("{} scores vs {} labels", scores.len(), positives.len())));
    }
    let p = positives.iter().filter(|&&y| y).count() as u64;
    let n = positives.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(CastError::DegenerateEval { positives: p as usize, negatives: n as usize });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CastError::NumericalFailure("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area = 0u64;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let denom = 2 * p * n;
    Ok(Roc { points, auc: twice_area as f64 / denom as f64, auc_numer: twice_area, auc_denom: denom })
}

// ---- evaluation -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VideoScore {
    pub source_id: String,
    pub label: Option<Label>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalLogitMode,
    pub confusion: Confusion,
    pub roc: Roc,
    pub videos: Vec<VideoScore>,
}

impl EvalReport {
    pub fn from_scores(mode: EvalLogitMode, videos: Vec<VideoScore>) -> Result<Self> {
        let scores: Vec<f64> = videos.iter().map(|v| v.score).collect();
        let positives = videos
            .iter()
            .map(|v| {
                v.label
                    .map(|l| l == Label::Fake)
                    .ok_or_else(|| CastError::config(format!("clip {} has no label", v.source_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let confusion = accuracy(&scores, &positives)?;
        let roc = roc_auc(&scores, &positives)?;
        Ok(Self { mode, confusion, roc, videos })
    }

    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy
    }

    pub fn auc(&self) -> f64 {
        self.roc.auc
    }

    /// Flat `key = value` summary.
    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        format!(
            "mode = {}\nvideos = {}\ntp = {}\ntn = {}\nfp = {}\nfn = {}\naccuracy = {}\nauc = {}\n",
            self.mode,
            self.videos.len(),
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            c.accuracy,
            self.roc.auc
        )
    }

    pub fn roc_text(&self) -> String {
        self.roc.points.iter().map(|(f, t)| format!("{f}\t{t}\n")).collect()
    }

    pub fn scores_text(&self) -> String {
        self.videos
            .iter()
            .map(|v| {
                let label = match v.label {
                    Some(Label::Fake) => "1",
                    Some(Label::Real) => "0",
                    None => "-",
                };
                format!("{}\t{label}\t{}\n", v.source_id, v.score)
            })
            .collect()
    }

    /// Writes `report.txt`, `roc.tsv` and `scores.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("report.txt"), self.to_text().as_bytes())?;
        write_atomic(&dir.join("roc.tsv"), self.roc_text().as_bytes())?;
        write_atomic(&dir.join("scores.tsv"), self.scores_text().as_bytes())
    }
}

/// Worker count for evaluation: `CAST_THREADS` if set, else the machine's parallelism.
pub fn eval_threads() -> usize {
    std::env::var("CAST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Eval-mode forward over every clip, fanned out over worker threads; the
/// result is in input order.
pub fn predict<T: Real>(model: &CastModel<T>, clips: &[FrameClip]) -> Result<Vec<crate::model::ModelOutput<T>>> {
    let threads = eval_threads().min(clips.len()).max(1);
    if threads == 1 {
        return clips.iter().map(|c| model.forward(c)).collect();
    }
    let chunk = clips.len().div_ceil(threads);
    let parts: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| model.forward(c)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(clips.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_clips<T: Real>(model: &CastModel<T>, clips: &[FrameClip], mode: EvalLogitMode) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(CastError::EmptyEval);
    }
    for c in clips {
        model.check_clip(c).map_err(|e| CastError::CheckpointMismatch(e.to_string()))?;
    }
    let outputs = predict(model, clips)?;
    let videos = clips
        .iter()
        .zip(&outputs)
        .map(|(c, o)| VideoScore { source_id: c.source_id.clone(), label: c.label, score: o.score(mode) })
        .collect();
    EvalReport::from_scores(mode, videos)
}

/// Loads a checkpoint and scores every clip the manifest lists for `split`
/// (or every clip, when `split` is `None`).
pub fn evaluate<T: Real>(checkpoint: &Path, manifest: &Manifest, split: Option<Split>, mode: EvalLogitMode) -> Result<EvalReport> {
    let model = CastModel::<T>::load(checkpoint)?;
    let clips = load_clips(manifest, split)?;
    evaluate_clips(&model, &clips, mode)
}

pub fn load_clips(manifest: &Manifest, split: Option<Split>) -> Result<Vec<FrameClip>> {
    manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| manifest.load_clip(r))
        .collect()
}

// ---- training ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

impl EpochRecord {
    pub fn row(&self) -> String {
        format!("{}\t{:.10}\t{:.10}\t{:.10}\n", self.epoch, self.train_loss, self.val_loss, self.val_auc)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters from the best epoch.
    pub best: CastModel<T>,
    /// Parameters after the last epoch.
    pub last: CastModel<T>,
    pub checkpoint: PathBuf,
    pub history_path: PathBuf,
}

/// Mean clip-logit BCE and the clip scores of `model` on `clips`.
pub fn validation_metrics<T: Real>(model: &CastModel<T>, clips: &[FrameClip]) -> Result<(f64, f64)> {
    let outputs = predict(model, clips)?;
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(clips.len());
    let mut positives = Vec::with_capacity(clips.len());
    for (c, o) in clips.iter().zip(&outputs) {
        let y = c.label.ok_or_else(|| CastError::config(format!("validation clip {} has no label", c.source_id)))?;
        loss += bce_with_logits(o.clip_logit.f64(), y.target());
        scores.push(o.score(model.config.eval_logit_mode));
        positives.push(y == Label::Fake);
    }
    let auc = roc_auc(&scores, &positives).map_or(f64::NAN, |r| r.auc);
    Ok((loss / clips.len() as f64, auc))
}

/// One optimizer step on `batch`. Returns the mean batch loss, or `None` when
/// the loss or its gradients were non-finite and the step was skipped.
pub fn train_step<T: Real>(
    model: &mut CastModel<T>,
    adam: &mut AdamState<T>,
    batch: &[&FrameClip],
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let (loss, grads) = {
        let bound = model.bind(&mut g);
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (i, clip) in batch.iter().enumerate() {
            let y = clip.label.ok_or_else(|| CastError::config(format!("training clip {} has no label", clip.source_id)))?;
            let x = model.clip_input(&mut g, clip)?;
            let mut ctx = Ctx::new(Mode::Train, model.config.dropout, mix(step_seed, i as u64));
            let out = match bound.forward(&mut g, x, &mut ctx) {
                Ok(o) => o,
                Err(CastError::NumericalFailure(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            logits.push(out.clip_logit);
            targets.push(y.target());
        }
        let z = g.concat_last(&logits)?;
        let per_clip = g.bce_with_logits(z, &targets)?;
        let loss = g.mean(per_clip)?;
        let value = g.value(loss).item().f64();
        if !value.is_finite() {
            return Ok(None);
        }
        let grads = match g.backward_seeded(loss, T::c(cfg.loss_scale)) {
            Ok(map) => bound.bound.gradients(&map),
            Err(CastError::NumericalFailure(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        (value, grads)
    };
    let mut params: Vec<&mut Tensor<T>> = model.params.tensors_mut().collect();
    let applied = adam_step(&mut params, &grads, adam, cfg)?;
    Ok(applied.then_some(loss))
}

/// Trains from a fresh initialization, keeping the checkpoint with the lowest
/// validation loss. `progress` sees each epoch's record as it completes.
pub fn train<T: Real>(
    model_cfg: &CastConfig,
    train_clips: &[FrameClip],
    val_clips: &[FrameClip],
    cfg: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(CastError::EmptyEval);
    }
    let mut model = CastModel::<T>::init(model_cfg.clone(), mix(cfg.seed, 0x1417))?;
    for c in train_clips.iter().chain(val_clips) {
        model.check_clip(c)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let history_path = out_dir.join(HISTORY_FILE);
    let mut adam = AdamState::new(model.params.tensors());
    let mut history = Vec::new();
    let mut history_text = String::new();
    let mut best: Option<(usize, f64, CastModel<T>)> = None;
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = mix(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut total, mut counted) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&FrameClip> = idx.iter().map(|&i| &train_clips[i]).collect();
            if let Some(loss) = train_step(&mut model, &mut adam, &batch, cfg, mix(epoch_seed, step as u64))? {
                total += loss * batch.len() as f64;
                counted += batch.len();
            }
        }
        if counted == 0 {
            return Err(CastError::Divergence(format!("every batch of epoch {epoch} had a non-finite loss")));
        }
        let (val_loss, val_auc) = validation_metrics(&model, val_clips)?;
        let record = EpochRecord { epoch, train_loss: total / counted as f64, val_loss, val_auc };
        history_text.push_str(&record.row());
        write_atomic(&history_path, history_text.as_bytes())?;
        if val_loss.is_finite() && best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            model.save(&checkpoint)?;
            best = Some((epoch, val_loss, model.clone()));
        }
        history.push(record);
        progress(&record);
    }
    let (best_epoch, best_val_loss, best_model) =
        best.ok_or_else(|| CastError::Divergence("validation loss was never finite".into()))?;
    Ok(TrainOutcome { history, best_epoch, best_val_loss, best: best_model, last: model, checkpoint, history_path })
}

/// [`train`] on the `train` and `val` splits of a manifest.
pub fn train_from_manifest<T: Real>(
    model_cfg: &CastConfig,
    manifest: &Manifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let train_clips = load_clips(manifest, Some(Split::Train))?;
    let val_clips = load_clips(manifest, Some(Split::Val))?;
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(CastError::config("manifest needs non-empty train and val splits"));
    }
    train(model_cfg, &train_clips, &val_clips, cfg, out_dir, progress)
}
