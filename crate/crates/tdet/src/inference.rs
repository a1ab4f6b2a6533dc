//! Prediction pipeline: window planning over long videos, greedy NMS,
//! two-stage detection over a buffer, and the tab-separated detection
//! format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{decode_offsets, segment_iou, AnchorGrid, OffsetPair, TemporalSegment};
use crate::loss::softmax;
use crate::model::{class_offset_slots, pair_indices, Model};
use crate::roipool::project_to_units;

/// A segment with an objectness or class score.
#[derive(Clone, Copy, Debug)]
pub struct ScoredSegment {
    pub segment: TemporalSegment,
    pub score: f64,
}

/// A classified activity in video-global frame coordinates.
#[derive(Clone, Copy, Debug)]
pub struct ScoredDetection {
    pub segment: TemporalSegment,
    /// Activity class, 1-based; never the background id 0.
    pub class_id: u32,
    pub score: f64,
}

/// Window direction over the source video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// One fixed-length window of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    /// Start frame. For reverse windows the offset indexes the reversed
    /// frame order.
    pub offset: usize,
    pub direction: Direction,
}

/// Tiling of a video into fixed-length windows.
#[derive(Clone, Debug)]
pub struct BufferPlan {
    pub buffer_length: usize,
    pub windows: Vec<Window>,
    /// Frames of last-frame replication applied to the tail window of each
    /// pass.
    pub padding: usize,
}

/// Window passes to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferMode {
    OneWay,
    /// Adds a reverse pass; used to augment training data.
    TwoWay,
}

/// Tiles `video_length` frames with non-overlapping windows of
/// `buffer_length`; the tail window is padded by replicating the last frame.
/// Two-way mode appends the same tiling over the reversed frame order.
pub fn build_buffers(
    video_length: usize,
    buffer_length: usize,
    mode: BufferMode,
) -> Result<BufferPlan> {
    if video_length == 0 {
        return Err(Error::InvalidConfig("video has no frames".into()));
    }
    if buffer_length == 0 || buffer_length % 8 != 0 {
        return Err(Error::InvalidConfig(format!(
            "buffer length {buffer_length} must be a positive multiple of 8"
        )));
    }
    let n = video_length.div_ceil(buffer_length);
    let padding = n * buffer_length - video_length;
    let mut windows: Vec<Window> = (0..n)
        .map(|i| Window {
            offset: i * buffer_length,
            direction: Direction::Forward,
        })
        .collect();
    if mode == BufferMode::TwoWay {
        windows.extend((0..n).map(|i| Window {
            offset: i * buffer_length,
            direction: Direction::Reverse,
        }));
    }
    Ok(BufferPlan {
        buffer_length,
        windows,
        padding,
    })
}

/// Cuts one window out of a `[C, L, H, W]` feature video, replicating the
/// final frame (of the window's direction) past the end of the video.
pub fn extract_window(video: &Tensor<f32>, window: Window, buffer_length: usize) -> Result<Tensor<f32>> {
    let dims = video.dims();
    if dims.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            got: dims.to_vec(),
        });
    }
    let (c, l, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    if l == 0 {
        return Err(Error::InvalidConfig("video has no frames".into()));
    }
    let s = h * w;
    let mut out = Tensor::zeros(&[c, buffer_length, h, w]);
    let src = video.data();
    let dst = out.data_mut();
    for cc in 0..c {
        for t in 0..buffer_length {
            // frame index in the (possibly reversed) video, clamped to the end
            let v = (window.offset + t).min(l - 1);
            let tv = match window.direction {
                Direction::Forward => v,
                Direction::Reverse => l - 1 - v,
            };
            let s_row = &src[(cc * l + tv) * s..(cc * l + tv + 1) * s];
            let d_row = &mut dst[(cc * buffer_length + t) * s..(cc * buffer_length + t + 1) * s];
            d_row.copy_from_slice(s_row);
        }
    }
    Ok(out)
}

/// Greedy non-maximum suppression: repeatedly keep the highest-scoring
/// remaining candidate and discard every remaining candidate whose IoU with
/// it exceeds `threshold`. Returns kept indices in descending score order;
/// score ties favor the earlier index.
pub fn nms(candidates: &[ScoredSegment], threshold: f64) -> Vec<usize> {
    assert!(
        (0.0..=1.0).contains(&threshold),
        "nms threshold {threshold} outside [0, 1]"
    );
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut alive = vec![true; candidates.len()];
    for &i in &order {
        if !alive[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if alive[j]
                && j != i
                && segment_iou(candidates[i].segment, candidates[j].segment) > threshold
            {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Detection thresholds and caps.
#[derive(Clone, Debug)]
pub struct DetectConfig {
    /// Anchor scales, in feature-map units.
    pub scales: Vec<usize>,
    /// Stage-1 suppression threshold.
    pub proposal_nms: f64,
    /// Final per-class suppression threshold.
    pub final_nms: f64,
    /// Minimum class posterior for a detection to survive.
    pub score_floor: f64,
    /// Stage-1 survivors passed to the classifier.
    pub max_proposals: usize,
}

impl DetectConfig {
    /// Defaults: proposal NMS 0.7, final NMS one tenth under the evaluation
    /// IoU threshold, score floor 0.05, proposal cap 300.
    pub fn new(scales: Vec<usize>, eval_iou: f64) -> Result<Self> {
        let cfg = DetectConfig {
            scales,
            proposal_nms: 0.7,
            final_nms: eval_iou - 0.1,
            score_floor: 0.05,
            max_proposals: 300,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::EmptyScales);
        }
        for &t in &[self.proposal_nms, self.final_nms] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!(
                    "NMS threshold {t} outside [0, 1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::InvalidConfig(format!(
                "score floor {} outside [0, 1]",
                self.score_floor
            )));
        }
        if self.max_proposals == 0 {
            return Err(Error::InvalidConfig("max_proposals must be positive".into()));
        }
        Ok(())
    }
}

// Predicted offsets are clamped before decoding so that an untrained or
// mid-training head cannot produce overflowing or absurdly long segments.
const MAX_DELTA_CENTER: f64 = 8.0;
const MAX_DELTA_LOG_LENGTH: f64 = 6.0;

fn clamp_offsets(o: OffsetPair) -> OffsetPair {
    OffsetPair::new(
        o.delta_center.clamp(-MAX_DELTA_CENTER, MAX_DELTA_CENTER),
        o.delta_log_length.clamp(-MAX_DELTA_LOG_LENGTH, MAX_DELTA_LOG_LENGTH),
    )
}

/// Decodes, clamps, and clips one predicted segment; `None` when nothing
/// usable remains inside `[0, extent]`.
pub(crate) fn decode_clipped(
    base: TemporalSegment,
    offsets: OffsetPair,
    extent: f64,
) -> Option<TemporalSegment> {
    let seg = decode_offsets(base, clamp_offsets(offsets)).ok()?;
    let seg = seg.clip(0.0, extent)?;
    if seg.length() <= 0.0 {
        return None;
    }
    Some(seg)
}

/// Stage 1 over one buffer: scores every anchor, decodes its offsets, clips
/// to the buffer, suppresses at `proposal_nms`, and keeps the top
/// `max_proposals`. Reported scores are the softmax activity probabilities;
/// suppression and the cap rank by the logit margin, which orders the same
/// way but cannot saturate.
pub fn propose_buffer(
    model: &Model,
    buffer: &Tensor<f32>,
    config: &DetectConfig,
) -> Result<Vec<ScoredSegment>> {
    config.validate()?;
    if config.scales.len() != model.config().num_scales {
        return Err(Error::InvalidConfig(format!(
            "{} anchor scales for a model scoring {}",
            config.scales.len(),
            model.config().num_scales
        )));
    }
    let frames = buffer.dims()[1];
    let num_locations = model.config().feature_len(frames)?;
    let grid = AnchorGrid::generate(num_locations, &config.scales, model.config().stride())?;

    let mut session = model.session::<f32>(false);
    let input = session.input(buffer.clone())?;
    let features = session.backbone(input)?;
    let (scores_id, offsets_id) = session.proposal_head(features)?;
    let scores = session.graph.value(scores_id).data();
    let offsets = session.graph.value(offsets_id).data();

    let extent = frames as f64;
    let mut candidates = Vec::with_capacity(grid.len());
    // Softmax probabilities of confident anchors round to exactly 1.0 in
    // f64, which would leave suppression order to tie-breaking. The logit
    // margin orders identically and never saturates, so it drives NMS while
    // the probability is what gets reported.
    let mut ranking = Vec::with_capacity(grid.len());
    for (idx, &anchor) in grid.anchors().iter().enumerate() {
        let (j, k) = grid.unflatten(idx);
        let [bg, act] = pair_indices(k, j, num_locations).map(|i| scores[i] as f64);
        let p = softmax(&[bg, act])[1];
        let [dc, dl] = pair_indices(k, j, num_locations).map(|i| offsets[i] as f64);
        if let Some(seg) = decode_clipped(anchor, OffsetPair::new(dc, dl), extent) {
            candidates.push(ScoredSegment {
                segment: seg,
                score: p,
            });
            ranking.push(ScoredSegment {
                segment: seg,
                score: act - bg,
            });
        }
    }
    let kept = nms(&ranking, config.proposal_nms);
    Ok(kept
        .into_iter()
        .take(config.max_proposals)
        .map(|i| candidates[i])
        .collect())
}

/// Stage 2 over one buffer: pools each proposal, classifies it, refines its
/// boundary with the predicted class's offsets, drops background and
/// sub-floor results, and suppresses per class. Coordinates stay
/// buffer-local.
pub fn detect_buffer(
    model: &Model,
    buffer: &Tensor<f32>,
    config: &DetectConfig,
) -> Result<Vec<ScoredDetection>> {
    let proposals = propose_buffer(model, buffer, config)?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let frames = buffer.dims()[1];
    let num_locations = model.config().feature_len(frames)?;
    let stride = model.config().stride();
    let num_classes = model.config().num_classes;

    let mut regions = Vec::new();
    let mut kept_proposals = Vec::new();
    for p in &proposals {
        if let Ok(span) = project_to_units(p.segment, stride, num_locations) {
            regions.push(span);
            kept_proposals.push(p.segment);
        }
    }
    if regions.is_empty() {
        return Ok(Vec::new());
    }

    let mut session = model.session::<f32>(false);
    let input = session.input(buffer.clone())?;
    let features = session.backbone(input)?;
    let outputs = session.classification_head(features, &regions)?;

    let extent = frames as f64;
    let mut detections = Vec::new();
    for (out, &proposal) in outputs.iter().zip(&kept_proposals) {
        let logits: Vec<f64> = session
            .graph
            .value(out.class_logits)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let posterior = softmax(&logits);
        let (class_id, &score) = posterior
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite posterior"))
            .expect("non-empty posterior");
        if class_id == 0 || score < config.score_floor {
            continue;
        }
        let offs = session.graph.value(out.offsets).data();
        let [ic, il] = class_offset_slots(class_id as u32);
        let pair = OffsetPair::new(offs[ic] as f64, offs[il] as f64);
        if let Some(seg) = decode_clipped(proposal, pair, extent) {
            detections.push(ScoredDetection {
                segment: seg,
                class_id: class_id as u32,
                score,
            });
        }
    }

    let mut final_dets = Vec::new();
    for class in 1..=num_classes as u32 {
        let class_dets: Vec<&ScoredDetection> =
            detections.iter().filter(|d| d.class_id == class).collect();
        let scored: Vec<ScoredSegment> = class_dets
            .iter()
            .map(|d| ScoredSegment {
                segment: d.segment,
                score: d.score,
            })
            .collect();
        for i in nms(&scored, config.final_nms) {
            final_dets.push(*class_dets[i]);
        }
    }
    final_dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok(final_dets)
}

/// Runs detection over a whole video: one-way window plan, per-buffer
/// detection, then mapping back to video-global frames. Detections that lie
/// entirely in replicated padding are dropped; the rest are clipped to the
/// video extent.
pub fn detect_video(
    model: &Model,
    video: &Tensor<f32>,
    config: &DetectConfig,
) -> Result<Vec<ScoredDetection>> {
    let video_length = video.dims().get(1).copied().unwrap_or(0);
    let plan = build_buffers(video_length, preferred_buffer_length(model, video_length)?, BufferMode::OneWay)?;
    let mut all = Vec::new();
    for window in &plan.windows {
        let buffer = extract_window(video, *window, plan.buffer_length)?;
        for det in detect_buffer(model, &buffer, config)? {
            let global = det.segment.translate(window.offset as f64);
            if global.start() >= video_length as f64 {
                continue;
            }
            if let Some(seg) = global.clip(0.0, video_length as f64) {
                if seg.length() > 0.0 {
                    all.push(ScoredDetection { segment: seg, ..det });
                }
            }
        }
    }
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    Ok(all)
}

/// Stage-1 proposals for a whole video in global frame coordinates.
pub fn propose_video(
    model: &Model,
    video: &Tensor<f32>,
    config: &DetectConfig,
) -> Result<Vec<ScoredSegment>> {
    let video_length = video.dims().get(1).copied().unwrap_or(0);
    let plan = build_buffers(video_length, preferred_buffer_length(model, video_length)?, BufferMode::OneWay)?;
    let mut all = Vec::new();
    for window in &plan.windows {
        let buffer = extract_window(video, *window, plan.buffer_length)?;
        for p in propose_buffer(model, &buffer, config)? {
            let global = p.segment.translate(window.offset as f64);
            if global.start() >= video_length as f64 {
                continue;
            }
            if let Some(seg) = global.clip(0.0, video_length as f64) {
                if seg.length() > 0.0 {
                    all.push(ScoredSegment { segment: seg, score: p.score });
                }
            }
        }
    }
    Ok(all)
}

/// Window length used when detecting over a full video: the standard 768
/// frames, or the video length rounded up to a stride multiple when the
/// video is shorter than one standard window.
pub fn preferred_buffer_length(model: &Model, video_length: usize) -> Result<usize> {
    if video_length == 0 {
        return Err(Error::InvalidConfig("video has no frames".into()));
    }
    let standard = 768;
    if video_length >= standard {
        Ok(standard)
    } else {
        Ok(video_length.div_ceil(model.config().stride()) * model.config().stride())
    }
}

/// One line of the detection exchange format.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub video: String,
    pub class_id: u32,
    pub start_seconds: f64,
    pub end_seconds: f64,
    pub score: f64,
}

/// Writes records as tab-separated lines: video id, class id, start
/// (seconds), end (seconds), score.
pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            r.video, r.class_id, r.start_seconds, r.end_seconds, r.score
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the tab-separated detection format, reporting the offending line
/// on failure.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad {what} {s:?}: {e}"),
            })
        };
        let class_id: u32 = fields[1].parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("bad class id {:?}: {e}", fields[1]),
        })?;
        let start_seconds = parse_f(fields[2], "start")?;
        let end_seconds = parse_f(fields[3], "end")?;
        let score = parse_f(fields[4], "score")?;
        if class_id == 0 {
            return Err(Error::Validation {
                line: i + 1,
                msg: "background class in detection file".into(),
            });
        }
        if end_seconds < start_seconds || !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation {
                line: i + 1,
                msg: format!(
                    "inconsistent record: span [{start_seconds}, {end_seconds}], score {score}"
                ),
            });
        }
        out.push(DetectionRecord {
            video: fields[0].to_string(),
            class_id,
            start_seconds,
            end_seconds,
            score,
        });
    }
    Ok(out)
}
