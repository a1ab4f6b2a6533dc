//! Joint two-stage training: window planning with the reverse-pass
//! augmentation, anchor and region label assignment, balanced sampling, the
//! combined classification/regression objective, and plain SGD with a staged
//! learning-rate drop.
//!
//! Each step is split into a *plan* (all discrete choices: which anchors and
//! regions are sampled, their targets, the region spans) and a *loss build*
//! that wires exactly the planned terms into a differentiable graph. The
//! split keeps steps reproducible and lets gradient checks rebuild the same
//! objective under perturbed parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assignment::{
    assign_class_labels, assign_proposal_labels, sample_minibatch, AssignedLabel, SamplerConfig,
};
use crate::autodiff::{NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, OffsetPair, TemporalSegment};
use crate::inference::{
    build_buffers, decode_clipped, extract_window, nms, BufferMode, ScoredSegment, Window,
};
use crate::loss::softmax;
use crate::model::{class_offset_slots, pair_indices, Model, Session};
use crate::roipool::project_to_units;

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub buffer_length: usize,
    /// Anchor scales in feature-map units.
    pub scales: Vec<usize>,
    pub lr: f64,
    /// Epochs at the base learning rate.
    pub epochs_initial: usize,
    /// Epochs at the decayed rate.
    pub epochs_decayed: usize,
    /// Multiplier applied to `lr` for the decayed epochs.
    pub decay_factor: f64,
    /// Weight of the regression terms.
    pub lambda: f64,
    /// Anchor IoU above which an anchor is positive.
    pub pos_iou_hi: f64,
    /// Anchor IoU below which (against all ground truths) it is negative.
    pub pos_iou_lo: f64,
    /// Region IoU above which a proposal takes a ground truth's class.
    pub cls_iou: f64,
    pub anchor_batch: usize,
    pub anchor_pos_fraction: f64,
    pub region_batch: usize,
    pub region_pos_fraction: f64,
    /// Suppression threshold for the training-time proposal pool.
    pub proposal_nms: f64,
    /// Cap on the training-time proposal pool.
    pub max_proposals: usize,
    /// Add the reverse-direction pass over every video.
    pub two_way: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(scales: Vec<usize>) -> Self {
        TrainConfig {
            buffer_length: 768,
            scales,
            lr: 1e-4,
            epochs_initial: 10,
            epochs_decayed: 5,
            decay_factor: 0.1,
            lambda: 1.0,
            pos_iou_hi: 0.7,
            pos_iou_lo: 0.3,
            cls_iou: 0.5,
            anchor_batch: 64,
            anchor_pos_fraction: 0.5,
            region_batch: 64,
            region_pos_fraction: 0.25,
            proposal_nms: 0.7,
            max_proposals: 300,
            two_way: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::EmptyScales);
        }
        if self.buffer_length == 0 || self.buffer_length % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "buffer length {} must be a positive multiple of 8",
                self.buffer_length
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad lambda {}", self.lambda)));
        }
        if !(0.0 < self.pos_iou_lo && self.pos_iou_lo <= self.pos_iou_hi && self.pos_iou_hi < 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "bad anchor IoU band ({}, {})",
                self.pos_iou_lo, self.pos_iou_hi
            )));
        }
        if !(0.0 < self.cls_iou && self.cls_iou < 1.0) {
            return Err(Error::InvalidConfig(format!("bad class IoU {}", self.cls_iou)));
        }
        SamplerConfig::new(self.anchor_batch, self.anchor_pos_fraction, 0)?;
        SamplerConfig::new(self.region_batch, self.region_pos_fraction, 0)?;
        if self.max_proposals == 0 {
            return Err(Error::InvalidConfig("max_proposals must be positive".into()));
        }
        Ok(())
    }
}

/// One video prepared for training: its feature tensor and its ground
/// truths in frame units.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub tensor: Tensor<f32>,
    pub gts: Vec<(TemporalSegment, u32)>,
}

/// A sampled anchor with its classification target and, when positive, its
/// regression target.
#[derive(Clone, Copy, Debug)]
pub struct AnchorSample {
    pub location: usize,
    pub scale_idx: usize,
    pub is_positive: bool,
    pub target: OffsetPair,
}

/// A sampled region with its class target (0 = background) and, when
/// positive, its regression target.
#[derive(Clone, Debug)]
pub struct RegionSample {
    pub span: (usize, usize),
    pub class_id: u32,
    pub target: Option<OffsetPair>,
}

/// Frozen discrete choices for one training step.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub anchor_samples: Vec<AnchorSample>,
    pub region_samples: Vec<RegionSample>,
}

/// Scalar summary of one step's objective.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StepReport {
    pub total: f64,
    pub prop_cls: f64,
    pub prop_reg: f64,
    pub cls_cls: f64,
    pub cls_reg: f64,
    pub anchor_positives: usize,
    pub anchors_sampled: usize,
    pub region_positives: usize,
    pub regions_sampled: usize,
}

/// Stage-1 nodes shared by planning and the loss build.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Nodes {
    pub input: NodeId,
    pub features: NodeId,
    pub scores: NodeId,
    pub offsets: NodeId,
}

/// Runs backbone and proposal head over a buffer inside `session`.
pub fn forward_stage1<T: Real>(
    session: &mut Session<T>,
    buffer: Tensor<T>,
) -> Result<Stage1Nodes> {
    let input = session.input(buffer)?;
    let features = session.backbone(input)?;
    let (scores, offsets) = session.proposal_head(features)?;
    Ok(Stage1Nodes {
        input,
        features,
        scores,
        offsets,
    })
}

/// Ground truths transformed into a window's buffer coordinates: reverse
/// windows mirror them over the video extent first; spans are clipped to the
/// window's valid (unpadded) frames and spans shorter than one frame are
/// dropped.
pub fn window_ground_truths(
    gts: &[(TemporalSegment, u32)],
    video_frames: usize,
    window: Window,
    buffer_length: usize,
) -> Vec<(TemporalSegment, u32)> {
    let extent = video_frames as f64;
    let lo = window.offset as f64;
    let hi = (window.offset + buffer_length) as f64;
    gts.iter()
        .filter_map(|&(seg, class)| {
            let seg = match window.direction {
                crate::inference::Direction::Forward => seg,
                crate::inference::Direction::Reverse => seg.mirror(extent),
            };
            let clipped = seg.clip(lo, hi.min(extent))?;
            if clipped.length() < 1.0 {
                return None;
            }
            Some((clipped.translate(-lo), class))
        })
        .collect()
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix-style mixing keeps per-step sampler streams decorrelated
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Makes every discrete decision for a step from the stage-1 values: anchor
/// assignment and sampling, the NMS-pruned proposal pool (ground truths
/// appended so stage 2 always sees true positives once the head produces
/// them), region label assignment, and region sampling.
pub fn make_plan(
    scores: &[f64],
    offsets: &[f64],
    gts: &[(TemporalSegment, u32)],
    buffer_length: usize,
    num_units: usize,
    stride: usize,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<StepPlan> {
    let grid = AnchorGrid::generate(num_units, &config.scales, stride)?;
    let gt_segments: Vec<TemporalSegment> = gts.iter().map(|&(s, _)| s).collect();

    let anchor_table =
        assign_proposal_labels(&grid, &gt_segments, config.pos_iou_hi, config.pos_iou_lo)?;
    let anchor_sampler = SamplerConfig::new(
        config.anchor_batch,
        config.anchor_pos_fraction,
        mix_seed(config.seed, step_seed.wrapping_mul(2).wrapping_add(1)),
    )?;
    let anchor_indices = sample_minibatch(&anchor_table, &anchor_sampler)?;
    let anchor_samples: Vec<AnchorSample> = anchor_indices
        .iter()
        .map(|&idx| {
            let (location, scale_idx) = grid.unflatten(idx);
            let entry = &anchor_table.entries[idx];
            AnchorSample {
                location,
                scale_idx,
                is_positive: matches!(entry.label, AssignedLabel::Positive(_)),
                target: entry.regression_target.unwrap_or(OffsetPair::ZERO),
            }
        })
        .collect();

    // training-time proposal pool: decoded anchors, suppressed and capped,
    // plus the ground truths themselves
    let extent = buffer_length as f64;
    let mut candidates = Vec::with_capacity(grid.len());
    for (idx, &anchor) in grid.anchors().iter().enumerate() {
        let (j, k) = grid.unflatten(idx);
        let [bg, act] = pair_indices(k, j, num_units).map(|i| scores[i]);
        let p = softmax(&[bg, act])[1];
        let [dc, dl] = pair_indices(k, j, num_units).map(|i| offsets[i]);
        if let Some(seg) = decode_clipped(anchor, OffsetPair::new(dc, dl), extent) {
            candidates.push(ScoredSegment {
                segment: seg,
                score: p,
            });
        }
    }
    let mut proposals: Vec<TemporalSegment> = nms(&candidates, config.proposal_nms)
        .into_iter()
        .take(config.max_proposals)
        .map(|i| candidates[i].segment)
        .collect();
    proposals.extend(gt_segments.iter().copied());

    let mut spans = Vec::new();
    let mut span_segments = Vec::new();
    for &p in &proposals {
        if let Ok(span) = project_to_units(p, stride, num_units) {
            spans.push(span);
            span_segments.push(p);
        }
    }

    let mut region_samples = Vec::new();
    if !span_segments.is_empty() {
        let region_table = assign_class_labels(&span_segments, gts, config.cls_iou)?;
        let region_sampler = SamplerConfig::new(
            config.region_batch,
            config.region_pos_fraction,
            mix_seed(config.seed, step_seed.wrapping_mul(2)),
        )?;
        let region_indices = sample_minibatch(&region_table, &region_sampler)?;
        region_samples = region_indices
            .iter()
            .map(|&idx| {
                let entry = &region_table.entries[idx];
                let class_id = match entry.label {
                    AssignedLabel::Positive(c) => c,
                    _ => 0,
                };
                RegionSample {
                    span: spans[idx],
                    class_id,
                    target: entry.regression_target,
                }
            })
            .collect();
    }

    Ok(StepPlan {
        anchor_samples,
        region_samples,
    })
}

/// Differentiable objective for a frozen plan. Returns the scalar loss node
/// and its value breakdown. The objective per stage is the mean cross
/// entropy over sampled candidates plus `lambda` times the mean smooth L1
/// over positives; the two stages add.
pub fn build_loss<T: Real>(
    session: &mut Session<T>,
    stage1: &Stage1Nodes,
    plan: &StepPlan,
    lambda: f64,
) -> Result<(NodeId, StepReport)> {
    if plan.anchor_samples.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let num_units = session.graph.value(stage1.scores).dims()[1];
    let num_classes = session.config().num_classes;

    let mut terms: Vec<(NodeId, T)> = Vec::new();
    let mut report = StepReport::default();

    // stage 1: objectness over sampled anchors
    let mut score_ix = Vec::with_capacity(plan.anchor_samples.len() * 2);
    let mut targets = Vec::with_capacity(plan.anchor_samples.len());
    for s in &plan.anchor_samples {
        score_ix.extend(pair_indices(s.scale_idx, s.location, num_units));
        targets.push(s.is_positive as usize);
    }
    let n_anchor = plan.anchor_samples.len();
    let gathered = session.graph.gather(stage1.scores, score_ix)?;
    let prop_ce = session.graph.softmax_cross_entropy(gathered, 2, targets)?;
    report.prop_cls = session.graph.value(prop_ce).item().as_f64() / n_anchor as f64;
    report.anchors_sampled = n_anchor;
    terms.push((prop_ce, T::from_f64(1.0 / n_anchor as f64)));

    // stage 1: offsets over positive anchors
    let positives: Vec<&AnchorSample> = plan
        .anchor_samples
        .iter()
        .filter(|s| s.is_positive)
        .collect();
    report.anchor_positives = positives.len();
    if !positives.is_empty() {
        let mut off_ix = Vec::with_capacity(positives.len() * 2);
        let mut off_tg: Vec<T> = Vec::with_capacity(positives.len() * 2);
        for s in &positives {
            off_ix.extend(pair_indices(s.scale_idx, s.location, num_units));
            off_tg.push(T::from_f64(s.target.delta_center));
            off_tg.push(T::from_f64(s.target.delta_log_length));
        }
        let gathered_off = session.graph.gather(stage1.offsets, off_ix)?;
        let prop_sl1 = session.graph.smooth_l1(gathered_off, off_tg)?;
        report.prop_reg = session.graph.value(prop_sl1).item().as_f64() / positives.len() as f64;
        terms.push((prop_sl1, T::from_f64(lambda / positives.len() as f64)));
    }

    // stage 2: class and offset terms over sampled regions
    if !plan.region_samples.is_empty() {
        let spans: Vec<(usize, usize)> = plan.region_samples.iter().map(|r| r.span).collect();
        let outputs = session.classification_head(stage1.features, &spans)?;
        let n_regions = plan.region_samples.len();
        let n_pos = plan
            .region_samples
            .iter()
            .filter(|r| r.target.is_some())
            .count();
        report.regions_sampled = n_regions;
        report.region_positives = n_pos;
        for (sample, out) in plan.region_samples.iter().zip(&outputs) {
            let ce = session.graph.softmax_cross_entropy(
                out.class_logits,
                num_classes + 1,
                vec![sample.class_id as usize],
            )?;
            report.cls_cls += session.graph.value(ce).item().as_f64() / n_regions as f64;
            terms.push((ce, T::from_f64(1.0 / n_regions as f64)));
            if let Some(target) = sample.target {
                let ix = class_offset_slots(sample.class_id).to_vec();
                let picked = session.graph.gather(out.offsets, ix)?;
                let sl1 = session.graph.smooth_l1(
                    picked,
                    vec![
                        T::from_f64(target.delta_center),
                        T::from_f64(target.delta_log_length),
                    ],
                )?;
                report.cls_reg += session.graph.value(sl1).item().as_f64() / n_pos as f64;
                terms.push((sl1, T::from_f64(lambda / n_pos as f64)));
            }
        }
    }

    let total = session.graph.weighted_sum(&terms)?;
    report.total = session.graph.value(total).item().as_f64();
    Ok((total, report))
}

/// One SGD step on one buffer: plan, build, backpropagate, update. The
/// returned report reflects the objective before the update.
pub fn train_step(
    model: &mut Model,
    buffer: &Tensor<f32>,
    gts: &[(TemporalSegment, u32)],
    config: &TrainConfig,
    step_seed: u64,
    lr: f64,
) -> Result<StepReport> {
    let mut session = model.session::<f32>(true);
    let stage1 = forward_stage1(&mut session, buffer.clone())?;
    let num_units = session.graph.value(stage1.scores).dims()[1];
    let scores: Vec<f64> = session
        .graph
        .value(stage1.scores)
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let offsets: Vec<f64> = session
        .graph
        .value(stage1.offsets)
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let plan = make_plan(
        &scores,
        &offsets,
        gts,
        buffer.dims()[1],
        num_units,
        model.config().stride(),
        config,
        step_seed,
    )?;
    let (total, report) = build_loss(&mut session, &stage1, &plan, config.lambda)?;
    session.graph.backward(total)?;
    model.apply_gradients(&session, lr)?;
    Ok(report)
}

/// Loss means over one epoch.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_prop_cls: f64,
    pub mean_prop_reg: f64,
    pub mean_cls_cls: f64,
    pub mean_cls_reg: f64,
}

/// Full training run: per epoch, visit every window of every video (order
/// shuffled by a per-epoch seed) and take one SGD step each. The learning
/// rate is `lr` for the initial epochs, then `lr * decay_factor`. Aborts
/// with a diagnostic if the objective turns non-finite.
pub fn train(
    model: &mut Model,
    dataset: &[TrainVideo],
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mode = if config.two_way {
        BufferMode::TwoWay
    } else {
        BufferMode::OneWay
    };

    // the work list is (video index, window); rebuilt and reshuffled per epoch
    let mut logs = Vec::new();
    let total_epochs = config.epochs_initial + config.epochs_decayed;
    let mut global_step = 0u64;
    for epoch in 0..total_epochs {
        let lr = if epoch < config.epochs_initial {
            config.lr
        } else {
            config.lr * config.decay_factor
        };
        let mut work: Vec<(usize, Window)> = Vec::new();
        for (vi, video) in dataset.iter().enumerate() {
            let frames = video.tensor.dims()[1];
            let plan = build_buffers(frames, config.buffer_length, mode)?;
            for w in plan.windows {
                work.push((vi, w));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xE70C_0000 + epoch as u64));
        work.shuffle(&mut rng);

        let mut sums = StepReport::default();
        for &(vi, window) in &work {
            let video = &dataset[vi];
            let frames = video.tensor.dims()[1];
            let buffer = extract_window(&video.tensor, window, config.buffer_length)?;
            let gts = window_ground_truths(&video.gts, frames, window, config.buffer_length);
            let report = train_step(model, &buffer, &gts, config, global_step, lr)?;
            if !report.total.is_finite() {
                return Err(Error::Diverged {
                    step: global_step as usize,
                    value: report.total,
                });
            }
            sums.total += report.total;
            sums.prop_cls += report.prop_cls;
            sums.prop_reg += report.prop_reg;
            sums.cls_cls += report.cls_cls;
            sums.cls_reg += report.cls_reg;
            global_step += 1;
        }
        let n = work.len() as f64;
        let log = EpochLog {
            epoch,
            lr,
            steps: work.len(),
            mean_total: sums.total / n,
            mean_prop_cls: sums.prop_cls / n,
            mean_prop_reg: sums.prop_reg / n,
            mean_cls_cls: sums.cls_cls / n,
            mean_cls_reg: sums.cls_reg / n,
        };
        log::info!(
            "epoch {}: lr {:.2e}, loss {:.4} (prop {:.4}/{:.4}, cls {:.4}/{:.4})",
            log.epoch,
            log.lr,
            log.mean_total,
            log.mean_prop_cls,
            log.mean_prop_reg,
            log.mean_cls_cls,
            log.mean_cls_reg
        );
        logs.push(log);
    }
    Ok(logs)
}
