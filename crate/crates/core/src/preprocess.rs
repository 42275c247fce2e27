//! Frame sampling, resizing, normalization and the clip/manifest file formats.
//!
//! Face detection and video decoding are out of scope: inputs are already
//! face-cropped RGB frames with values in `[0, 1]`.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::{put_string_u16, write_atomic, Reader};
use crate::error::{CastError, Result};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 8] = b"CASTCLIP";
pub const CLIP_VERSION: u16 = 1;
pub const DEFAULT_CLIP_LEN: usize = 16;

/// Sampling interval `max(1, floor(f_orig / r))`.
pub fn compute_interval(f_orig: f64, r: f64) -> Result<usize> {
    if !(f_orig > 0.0 && f_orig.is_finite()) {
        return Err(CastError::InvalidRate(format!("frame rate must be positive, got {f_orig}")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(CastError::InvalidRate(format!("sampling rate must be positive, got {r}")));
    }
    Ok(((f_orig / r).floor() as usize).max(1))
}

/// Picks `target_count` frame indices from a video of `len` frames.
///
/// Candidates are `0, delta, 2·delta, …` (`F = floor(len/delta)` of them, or
/// just `0` when that is zero). With `F ≥ target_count` the selection walks the
/// candidates at a fixed stride `floor(F/target_count)`, so the k-th pick is
/// candidate `k·floor(F/target_count)`. Short videos are padded by repeating
/// the last candidate, so the result is non-decreasing rather than strictly
/// increasing in that case.
pub fn select_frames(len: usize, delta: usize, target_count: usize) -> Result<Vec<usize>> {
    if len < 1 {
        return Err(CastError::EmptyVideo);
    }
    if delta < 1 || target_count < 1 {
        return Err(CastError::config(format!("interval {delta} and target count {target_count} must be at least 1")));
    }
    let candidates = (len / delta).max(1);
    if candidates < target_count {
        let mut out: Vec<usize> = (0..candidates).map(|i| i * delta).collect();
        out.resize(target_count, (candidates - 1) * delta);
        return Ok(out);
    }
    let stride = candidates / target_count;
    Ok((0..target_count).map(|k| k * stride * delta).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub f_orig: f64,
    pub r: f64,
    pub delta: usize,
    pub len: usize,
    pub candidate_count: usize,
    pub selected_indices: Vec<usize>,
}

impl SamplingPlan {
    pub fn new(f_orig: f64, r: f64, len: usize, target_count: usize) -> Result<Self> {
        let delta = compute_interval(f_orig, r)?;
        let selected_indices = select_frames(len, delta, target_count)?;
        Ok(Self { f_orig, r, delta, len, candidate_count: len / delta, selected_indices })
    }
}

/// Per-channel RGB statistics used to standardize frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationSpec {
    pub const IMAGENET: Self = Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CastError::config(format!("normalization std must be positive, got {std:?}")));
        }
        Ok(Self { mean, std })
    }
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::IMAGENET
    }
}

fn frame_dims(frame: &Tensor, what: &str) -> Result<(usize, usize)> {
    match frame.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(CastError::shape(format!("{what} expects a [3, H, W] frame, got {s:?}"))),
    }
}

/// `(frame[c] - mean[c]) / std[c]` for each channel.
pub fn normalize_frame(frame: &Tensor, spec: &NormalizationSpec) -> Result<Tensor> {
    let (h, w) = frame_dims(frame, "normalize_frame")?;
    let mut out = frame.clone();
    for (c, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        plane.iter_mut().for_each(|v| *v = (*v - spec.mean[c]) / spec.std[c]);
    }
    Ok(out)
}

/// Inverse of [`normalize_frame`].
pub fn denormalize_frame(frame: &Tensor, spec: &NormalizationSpec) -> Result<Tensor> {
    let (h, w) = frame_dims(frame, "denormalize_frame")?;
    let mut out = frame.clone();
    for (c, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        plane.iter_mut().for_each(|v| *v = *v * spec.std[c] + spec.mean[c]);
    }
    Ok(out)
}

/// Converts interleaved 8-bit RGB (`h·w·3` bytes) to a `[3, h, w]` frame in `[0, 1]`.
pub fn frame_from_rgb8(h: usize, w: usize, pixels: &[u8]) -> Result<Tensor> {
    if pixels.len() != h * w * 3 {
        return Err(CastError::shape(format!("{} bytes for a {h}x{w} RGB frame", pixels.len())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Bilinear resize with half-pixel centers (`align_corners = false`); source
/// coordinates are clamped to the image.
pub fn resize_bilinear(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = frame_dims(frame, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(CastError::InvalidShape(vec![3, out_h, out_w]));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let src = frame.data();
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(&[3, out_h, out_w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    fn tag(label: Option<Self>) -> i8 {
        match label {
            None => -1,
            Some(Label::Real) => 0,
            Some(Label::Fake) => 1,
        }
    }

    fn from_tag(tag: i8) -> Result<Option<Self>> {
        match tag {
            -1 => Ok(None),
            0 => Ok(Some(Label::Real)),
            1 => Ok(Some(Label::Fake)),
            t => Err(CastError::format(format!("invalid label tag {t}"))),
        }
    }
}

/// A normalized, fixed-length stack of frames ready for the model.
///
/// Pixels are stored in single precision; models cast to their own precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: Tensor<f32>,
    pub label: Option<Label>,
    pub source_id: String,
    pub f_orig: f64,
    pub r: f64,
}

impl FrameClip {
    pub fn new(frames: Tensor<f32>, label: Option<Label>, source_id: impl Into<String>) -> Result<Self> {
        let clip = Self { frames, label, source_id: source_id.into(), f_orig: 0.0, r: 0.0 };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        match self.frames.shape() {
            [_, 3, _, _] => {}
            s => return Err(CastError::shape(format!("clip frames must be [F, 3, H, W], got {s:?}"))),
        }
        if !self.frames.all_finite() {
            return Err(CastError::NumericalFailure(format!("clip {} has non-finite pixels", self.source_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CLIP_MAGIC)?;
        out.write_all(&CLIP_VERSION.to_le_bytes())?;
        out.write_all(&Label::tag(self.label).to_le_bytes())?;
        put_string_u16(out, &self.source_id)?;
        out.write_all(&self.f_orig.to_le_bytes())?;
        out.write_all(&self.r.to_le_bytes())?;
        self.frames.write_to(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "clip");
        r.magic(CLIP_MAGIC)?;
        let version = r.u16()?;
        if version != CLIP_VERSION {
            return Err(CastError::format(format!("unsupported clip version {version}")));
        }
        let label = Label::from_tag(r.i8()?)?;
        let source_id = r.string_u16()?;
        let f_orig = r.f64()?;
        let rate = r.f64()?;
        let frames = Tensor::<f32>::read_with(&mut r)?;
        if r.at_eof()?.is_some() {
            return Err(CastError::format("trailing bytes after clip tensor"));
        }
        let clip = Self { frames, label, source_id, f_orig, r: rate };
        clip.validate().map_err(|e| CastError::format(e.to_string()))?;
        Ok(clip)
    }
}

pub fn write_clip(path: &Path, clip: &FrameClip) -> Result<()> {
    clip.validate()?;
    write_atomic(path, &clip.to_bytes())
}

pub fn read_clip(path: &Path) -> Result<FrameClip> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CastError::MissingInput(path.to_path_buf()),
        _ => CastError::Io(e),
    })?;
    FrameClip::read_from(std::io::BufReader::new(file))
}

/// Samples, resizes and normalizes raw `[3, H, W]` frames in `[0, 1]` into a clip.
#[allow(clippy::too_many_arguments)]
pub fn assemble_clip(
    raw_frames: &[Tensor],
    f_orig: f64,
    r: f64,
    clip_len: usize,
    out_hw: (usize, usize),
    spec: &NormalizationSpec,
    label: Option<Label>,
    source_id: &str,
) -> Result<FrameClip> {
    let plan = SamplingPlan::new(f_orig, r, raw_frames.len(), clip_len)?;
    let frames = plan
        .selected_indices
        .iter()
        .map(|&i| {
            let f = resize_bilinear(&raw_frames[i], out_hw.0, out_hw.1)?;
            normalize_frame(&f, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = Tensor::stack(&frames)?.cast::<f32>();
    let mut clip = FrameClip::new(stacked, label, source_id)?;
    clip.f_orig = f_orig;
    clip.r = r;
    Ok(clip)
}

// ---- manifest ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CastError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(CastError::format(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Option<Label>,
    pub split: Split,
}

/// Dataset listing: one `path\tlabel\tsplit` record per line. Labels are `0`
/// (real), `1` (fake) or `-` (unknown).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CastError::MissingInput(path.to_path_buf()),
            _ => CastError::Io(e),
        })?;
        let mut m = Self::parse(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| CastError::format(format!("manifest line {}: {msg}", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, split] = fields[..] else {
                return Err(bad("expected three tab-separated fields"));
            };
            let label = match label {
                "0" => Some(Label::Real),
                "1" => Some(Label::Fake),
                "-" => None,
                _ => return Err(bad(&format!("invalid label `{label}`"))),
            };
            let split = split.parse().map_err(|_| bad(&format!("invalid split `{split}`")))?;
            records.push(ManifestRecord { path: PathBuf::from(path), label, split });
        }
        Ok(Self { root: PathBuf::new(), records })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let label = match r.label {
                None => "-",
                Some(Label::Real) => "0",
                Some(Label::Fake) => "1",
            };
            s.push_str(&format!("{}\t{label}\t{}\n", r.path.display(), r.split));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.records.iter().any(|r| r.split == split)
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_clip(&self, record: &ManifestRecord) -> Result<FrameClip> {
        read_clip(&self.resolve(record))
    }
}
