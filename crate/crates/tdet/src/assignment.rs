//! IoU-driven label assignment and balanced minibatch sampling for both
//! training stages.
//!
//! Conventions fixed here: background is class id 0 and activity classes are
//! `1..=C`. Ties are broken deterministically: when several ground truths
//! share the best IoU with a candidate, the lowest ground-truth index wins;
//! when several candidates tie for a ground truth's best IoU, the lowest
//! candidate index is the one promoted by the highest-IoU rule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, segment_iou, AnchorGrid, OffsetPair, TemporalSegment};

/// Label of one candidate (anchor or proposal) after assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignedLabel {
    /// Matched to an activity; the payload is the class id (1-based; the
    /// proposal stage uses 1 for "activity").
    Positive(u32),
    Background,
    /// Held out from training.
    Ignored,
}

/// One row of the assignment table.
#[derive(Clone, Copy, Debug)]
pub struct Assignment {
    pub label: AssignedLabel,
    pub matched_gt: Option<usize>,
    pub regression_target: Option<OffsetPair>,
}

/// Per-candidate labels, matches, and regression targets.
#[derive(Clone, Debug)]
pub struct AssignmentTable {
    pub entries: Vec<Assignment>,
}

impl AssignmentTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        self.indices_where(|l| matches!(l, AssignedLabel::Positive(_)))
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        self.indices_where(|l| matches!(l, AssignedLabel::Background))
    }

    fn indices_where(&self, pred: impl Fn(AssignedLabel) -> bool) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| pred(e.label))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels every anchor against the ground truths: positive when IoU with some
/// ground truth exceeds `hi` or when the anchor is a ground truth's best
/// match; negative when IoU stays below `lo` against all ground truths;
/// ignored otherwise. Positives carry the offsets to their best ground truth.
///
/// The highest-IoU promotion applies even below `lo`, so every ground truth
/// with any overlap gets at least one positive anchor. A ground truth with
/// zero overlap everywhere yields no positive and is logged as a warning.
pub fn assign_proposal_labels(
    anchors: &AnchorGrid,
    gts: &[TemporalSegment],
    hi: f64,
    lo: f64,
) -> Result<AssignmentTable> {
    if anchors.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < lo <= hi < 1, got lo={lo}, hi={hi}"
        )));
    }

    let n = anchors.len();
    // best gt per anchor (lowest gt index on ties)
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![None; n];
    // best anchor per gt (lowest anchor index on ties)
    let mut gt_best_iou = vec![0.0f64; gts.len()];
    let mut gt_best_anchor = vec![None; gts.len()];

    for (ai, &anchor) in anchors.anchors().iter().enumerate() {
        for (gi, &gt) in gts.iter().enumerate() {
            let iou = segment_iou(anchor, gt);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = Some(gi);
            }
            if iou > gt_best_iou[gi] {
                gt_best_iou[gi] = iou;
                gt_best_anchor[gi] = Some(ai);
            }
        }
    }

    for (gi, ba) in gt_best_anchor.iter().enumerate() {
        if ba.is_none() {
            log::warn!(
                "ground truth {gi} [{:.1}, {:.1}] overlaps no anchor; it will produce no positive",
                gts[gi].start(),
                gts[gi].end()
            );
        }
    }

    let mut entries = Vec::with_capacity(n);
    for ai in 0..n {
        let promoted = gt_best_anchor.iter().any(|&ba| ba == Some(ai));
        let label = if best_iou[ai] > hi || promoted {
            AssignedLabel::Positive(1)
        } else if best_iou[ai] < lo {
            AssignedLabel::Background
        } else {
            AssignedLabel::Ignored
        };
        let entry = match label {
            AssignedLabel::Positive(_) => {
                // A promoted anchor may lack a recorded best_gt only when all
                // IoUs are 0, which the promotion rule already excludes.
                let gi = best_gt[ai].expect("positive anchor must have a matched gt");
                Assignment {
                    label,
                    matched_gt: Some(gi),
                    regression_target: Some(encode_offsets(anchors.anchors()[ai], gts[gi])?),
                }
            }
            _ => Assignment {
                label,
                matched_gt: None,
                regression_target: None,
            },
        };
        entries.push(entry);
    }
    Ok(AssignmentTable { entries })
}

/// Labels proposals for the classification stage: a proposal takes the class
/// of its highest-IoU ground truth when that IoU exceeds `thresh`, otherwise
/// it is background. Positives carry offsets to the matched ground truth.
pub fn assign_class_labels(
    proposals: &[TemporalSegment],
    gts: &[(TemporalSegment, u32)],
    thresh: f64,
) -> Result<AssignmentTable> {
    let mut entries = Vec::with_capacity(proposals.len());
    for &p in proposals {
        let mut best_iou = 0.0;
        let mut best = None;
        for (gi, &(gt, _)) in gts.iter().enumerate() {
            let iou = segment_iou(p, gt);
            if iou > best_iou {
                best_iou = iou;
                best = Some(gi);
            }
        }
        let entry = match best {
            Some(gi) if best_iou > thresh => Assignment {
                label: AssignedLabel::Positive(gts[gi].1),
                matched_gt: Some(gi),
                regression_target: Some(encode_offsets(p, gts[gi].0)?),
            },
            _ => Assignment {
                label: AssignedLabel::Background,
                matched_gt: None,
                regression_target: None,
            },
        };
        entries.push(entry);
    }
    Ok(AssignmentTable { entries })
}

/// Balanced sampling parameters. `positive_fraction` caps the share of
/// positives in a batch; shortfalls are filled with extra negatives.
#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn new(batch_size: usize, positive_fraction: f64, rng_seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2, got {batch_size}"
            )));
        }
        if !(0.0 < positive_fraction && positive_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "positive_fraction must be in (0, 1), got {positive_fraction}"
            )));
        }
        Ok(Self {
            batch_size,
            positive_fraction,
            rng_seed,
        })
    }
}

/// Draws a balanced minibatch of candidate indices from the table: up to
/// `positive_fraction * batch_size` positives, the rest negatives, both
/// subsampled uniformly with the seeded generator. Ignored entries are never
/// sampled. Positives come first in the returned list.
pub fn sample_minibatch(table: &AssignmentTable, config: &SamplerConfig) -> Result<Vec<usize>> {
    let mut positives = table.positive_indices();
    let mut negatives = table.negative_indices();
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::EmptyCandidates);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let pos_quota = (config.positive_fraction * config.batch_size as f64).floor() as usize;
    let n_pos = positives.len().min(pos_quota);
    let n_neg = negatives.len().min(config.batch_size - n_pos);

    if positives.len() > n_pos {
        positives.partial_shuffle(&mut rng, n_pos);
        positives.truncate(n_pos);
    }
    if negatives.len() > n_neg {
        negatives.partial_shuffle(&mut rng, n_neg);
        negatives.truncate(n_neg);
    }

    positives.extend(negatives);
    Ok(positives)
}
