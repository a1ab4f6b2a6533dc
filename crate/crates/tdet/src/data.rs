//! Synthetic dataset generation and the on-disk dataset formats: one
//! feature-video file per video plus a line-oriented JSON annotation index.
//!
//! Synthetic videos are Gaussian noise volumes with deterministic
//! class-specific patterns superimposed over the annotated spans. Each class
//! owns a fixed channel signature, spatial profile, and temporal oscillation
//! frequency, all derived from the class id alone, so a generated dataset is
//! fully reproducible from its seed and a matched filter can recover planted
//! segments when the noise is negligible.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::EvalGroundTruth;
use crate::geometry::TemporalSegment;

/// One annotated activity, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub class_id: u32,
    pub start_s: f64,
    pub end_s: f64,
}

/// One video of a dataset: identity, timing, feature file, annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub fps: f64,
    pub num_frames: usize,
    /// Feature-video file, relative to the annotation file's directory
    /// unless absolute.
    pub features: String,
    pub annotations: Vec<AnnotationSpan>,
}

impl VideoRecord {
    /// Invariant check; the message names the offending field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id: empty".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("fps: {} not positive", self.fps));
        }
        if self.num_frames == 0 {
            return Err("num_frames: zero".into());
        }
        if self.features.is_empty() {
            return Err("features: empty path".into());
        }
        let extent_s = self.num_frames as f64 / self.fps;
        for (i, a) in self.annotations.iter().enumerate() {
            if a.class_id == 0 {
                return Err(format!("annotations[{i}].class_id: background id 0"));
            }
            if !(a.start_s.is_finite() && a.end_s.is_finite()) {
                return Err(format!("annotations[{i}]: non-finite bounds"));
            }
            if !(0.0 <= a.start_s && a.start_s < a.end_s && a.end_s <= extent_s) {
                return Err(format!(
                    "annotations[{i}]: span [{}, {}] outside [0, {extent_s}] or empty",
                    a.start_s, a.end_s
                ));
            }
        }
        Ok(())
    }

    /// Annotation span in frame units.
    pub fn span_frames(&self, a: &AnnotationSpan) -> TemporalSegment {
        TemporalSegment::new(a.start_s * self.fps, a.end_s * self.fps)
    }
}

/// Ground truths (in seconds) for the evaluator.
pub fn ground_truths(records: &[VideoRecord]) -> Vec<EvalGroundTruth> {
    records
        .iter()
        .flat_map(|r| {
            r.annotations.iter().map(|a| EvalGroundTruth {
                video: r.id.clone(),
                class_id: a.class_id,
                segment: TemporalSegment::new(a.start_s, a.end_s),
            })
        })
        .collect()
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_videos: usize,
    /// Video length range in frames, inclusive.
    pub video_frames: (usize, usize),
    /// Activities per video, inclusive.
    pub activities: (usize, usize),
    /// Activity duration range in seconds, inclusive.
    pub duration_s: (f64, f64),
    /// When non-empty, durations are drawn uniformly from these frame
    /// counts instead of the continuous `duration_s` range; used to lay
    /// activities out on the same length ladder the anchors cover.
    #[serde(default)]
    pub duration_ladder: Vec<usize>,
    /// Peak pattern amplitude over noise standard deviation.
    pub snr: f64,
    pub channels: usize,
    pub spatial: (usize, usize),
    pub fps: f64,
    /// Placement retries give up above this pairwise IoU; 1.0 disables the
    /// constraint.
    pub max_overlap_iou: f64,
    pub rng_seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes == 0 || self.num_videos == 0 || self.channels == 0 {
            return bad("classes, videos, and channels must be positive".into());
        }
        if self.spatial.0 == 0 || self.spatial.1 == 0 {
            return bad("spatial dims must be positive".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return bad(format!("snr {} must be positive", self.snr));
        }
        if self.video_frames.0 == 0 || self.video_frames.0 > self.video_frames.1 {
            return bad(format!("bad video length range {:?}", self.video_frames));
        }
        if self.activities.0 > self.activities.1 {
            return bad(format!("bad activity count range {:?}", self.activities));
        }
        if !(0.0 < self.duration_s.0 && self.duration_s.0 <= self.duration_s.1) {
            return bad(format!("bad duration range {:?}", self.duration_s));
        }
        if !(0.0..=1.0).contains(&self.max_overlap_iou) {
            return bad(format!("overlap cap {} outside [0, 1]", self.max_overlap_iou));
        }
        let max_dur_frames = if self.duration_ladder.is_empty() {
            (self.duration_s.1 * self.fps).round() as usize
        } else {
            if self.duration_ladder.contains(&0) {
                return bad("duration ladder entries must be positive".into());
            }
            *self.duration_ladder.iter().max().unwrap()
        };
        if max_dur_frames > self.video_frames.0 {
            return bad(format!(
                "longest activity ({max_dur_frames} frames) exceeds shortest video ({} frames)",
                self.video_frames.0
            ));
        }
        Ok(())
    }
}

/// Deterministic per-class pattern ingredients: a channel signature with
/// peak magnitude 1, a spatial profile in [0.5, 1], and an oscillation
/// period in frames. The period is absolute (not duration-normalized) so a
/// class stays locally recognizable at every activity length, and each
/// class forces one dedicated channel to the full positive amplitude, which
/// survives max pooling where negative components do not.
fn class_pattern_params(class_id: u32, channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7D37_0000 + class_id as u64);
    let mut signature: Vec<f64> = (0..channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let peak = signature
        .iter()
        .map(|v| v.abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    for v in &mut signature {
        *v /= 1.25 * peak;
    }
    signature[(class_id as usize).saturating_sub(1) % channels] = 1.0;
    let profile: Vec<f64> = (0..h * w).map(|_| 0.5 + 0.5 * rng.gen::<f64>()).collect();
    let period = (24.0 - 4.0 * (class_id.saturating_sub(1)) as f64).max(8.0);
    (signature, profile, period)
}

/// The dense `[channels, duration, h, w]` template planted for a class:
/// channel signature x spatial profile x a temporal wave under a trapezoid
/// envelope whose ramps stay visible after temporal pooling. Peak magnitude
/// is 1.
pub fn pattern_volume(
    class_id: u32,
    duration_frames: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    assert!(duration_frames > 0 && channels > 0 && h > 0 && w > 0);
    let (signature, profile, period) = class_pattern_params(class_id, channels, h, w);
    let mut out = Tensor::zeros(&[channels, duration_frames, h, w]);
    let data = out.data_mut();
    let s = h * w;
    // Onset/offset ramps span up to one temporal pooling cell (8 frames) so
    // that boundary position survives the backbone's downsampling: the
    // boundary cell's pooled amplitude varies linearly with the sub-cell
    // offset. Short activities get proportionally shorter ramps.
    let ramp = (duration_frames as f64 / 4.0).clamp(2.0, 8.0);
    for t in 0..duration_frames {
        let edge = (t as f64 + 0.5).min(duration_frames as f64 - t as f64 - 0.5);
        let envelope = (edge / ramp).clamp(0.0, 1.0);
        // phase locked to the onset: one more boundary cue
        let wave = 0.7 + 0.3 * (2.0 * std::f64::consts::PI * (t as f64 + 0.5) / period).cos();
        let temporal = envelope * wave;
        for (c, &sig) in signature.iter().enumerate() {
            let base = (c * duration_frames + t) * s;
            for (cell, &sp) in profile.iter().enumerate() {
                data[base + cell] = (sig * temporal * sp) as f32;
            }
        }
    }
    out
}

/// Generates the dataset under `dir`: one feature-video file per video plus
/// `annotations.jsonl`. Returns the records in generation order. Every video
/// is derived from an independent stream of the seeded generator, so output
/// is byte-identical across runs with the same config.
pub fn generate_synthetic(config: &SynthConfig, dir: &Path) -> Result<Vec<VideoRecord>> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let (h, w) = config.spatial;
    let noise_std = 1.0 / config.snr;

    let mut records = Vec::with_capacity(config.num_videos);
    for vi in 0..config.num_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(1 + vi as u64);

        let frames = rng.gen_range(config.video_frames.0..=config.video_frames.1);
        let n_act = rng.gen_range(config.activities.0..=config.activities.1);

        let mut placed: Vec<(u32, usize, usize)> = Vec::new();
        for _ in 0..n_act {
            let class_id = rng.gen_range(1..=config.num_classes as u32);
            let dur = if config.duration_ladder.is_empty() {
                let dur_s = rng.gen_range(config.duration_s.0..=config.duration_s.1);
                ((dur_s * config.fps).round() as usize).clamp(1, frames)
            } else {
                config.duration_ladder[rng.gen_range(0..config.duration_ladder.len())]
                    .min(frames)
            };
            let mut accepted = None;
            for _ in 0..20 {
                let start = rng.gen_range(0..=frames - dur);
                let candidate = TemporalSegment::new(start as f64, (start + dur) as f64);
                let clash = placed.iter().any(|&(_, s0, d0)| {
                    let other = TemporalSegment::new(s0 as f64, (s0 + d0) as f64);
                    crate::geometry::segment_iou(candidate, other) > config.max_overlap_iou
                });
                if !clash {
                    accepted = Some(start);
                    break;
                }
            }
            if let Some(start) = accepted {
                placed.push((class_id, start, dur));
            }
        }
        placed.sort_by_key(|&(_, start, _)| start);

        let mut video = Tensor::zeros(&[config.channels, frames, h, w]);
        for v in video.data_mut() {
            *v = (rng.sample::<f64, _>(StandardNormal) * noise_std) as f32;
        }
        for &(class_id, start, dur) in &placed {
            let pattern = pattern_volume(class_id, dur, config.channels, h, w);
            let dst = video.data_mut();
            let src = pattern.data();
            for c in 0..config.channels {
                for t in 0..dur {
                    let d_base = (c * frames + start + t) * h * w;
                    let s_base = (c * dur + t) * h * w;
                    for cell in 0..h * w {
                        dst[d_base + cell] += src[s_base + cell];
                    }
                }
            }
        }

        let id = format!("video_{vi:04}");
        let features = format!("{id}.tdfv");
        save_feature_video(&dir.join(&features), &video)?;
        let annotations = placed
            .iter()
            .map(|&(class_id, start, dur)| AnnotationSpan {
                class_id,
                start_s: start as f64 / config.fps,
                end_s: (start + dur) as f64 / config.fps,
            })
            .collect();
        let record = VideoRecord {
            id,
            fps: config.fps,
            num_frames: frames,
            features,
            annotations,
        };
        debug_assert!(record.validate().is_ok());
        records.push(record);
    }
    write_annotations(&dir.join("annotations.jsonl"), &records)?;
    Ok(records)
}

/// Writes one JSON object per line.
pub fn write_annotations(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates the line-oriented annotation index; parse and
/// invariant failures name the line.
pub fn load_annotations(path: &Path) -> Result<Vec<VideoRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VideoRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        record.validate().map_err(|msg| Error::Validation {
            line: i + 1,
            msg,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Resolves a record's feature path against the directory of the annotation
/// file it came from.
pub fn feature_path(record: &VideoRecord, base_dir: &Path) -> PathBuf {
    let p = Path::new(&record.features);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

const FV_MAGIC: &[u8; 4] = b"TDFV";
const FV_VERSION: u32 = 1;

/// Writes a feature video: magic "TDFV", u32 version, u64 rank, dims as u64,
/// then the values as little-endian 32-bit reals in C order.
pub fn save_feature_video(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FV_MAGIC)?;
    w.write_all(&FV_VERSION.to_le_bytes())?;
    w.write_all(&(tensor.dims().len() as u64).to_le_bytes())?;
    for &d in tensor.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature video written by [`save_feature_video`].
pub fn load_feature_video(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FV_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, not a feature video"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FV_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature video version {version}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rank = u64::from_le_bytes(b8) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    if n > 1_000_000_000 {
        return Err(Error::Format(format!("implausible element count {n}")));
    }
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after values".into()));
    }
    Tensor::from_vec(&dims, data)
}

/// Loads the feature tensor referenced by a record.
pub fn load_video_tensor(record: &VideoRecord, base_dir: &Path) -> Result<Tensor<f32>> {
    let tensor = load_feature_video(&feature_path(record, base_dir))?;
    let dims = tensor.dims();
    if dims.len() != 4 || dims[1] != record.num_frames {
        return Err(Error::ShapeMismatch {
            expected: vec![0, record.num_frames, 0, 0],
            got: dims.to_vec(),
        });
    }
    Ok(tensor)
}
