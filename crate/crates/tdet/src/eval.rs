//! Detection quality metrics (per-class average precision, mAP over IoU
//! threshold grids) plus the proposal precision/recall check and an
//! inference throughput benchmark.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{segment_iou, TemporalSegment};
use crate::inference::{detect_buffer, DetectConfig};
use crate::model::Model;

/// A scored, classified detection attributed to a video.
#[derive(Clone, Debug)]
pub struct EvalDetection {
    pub video: String,
    pub class_id: u32,
    pub segment: TemporalSegment,
    pub score: f64,
}

/// A labeled ground-truth span attributed to a video.
#[derive(Clone, Debug)]
pub struct EvalGroundTruth {
    pub video: String,
    pub class_id: u32,
    pub segment: TemporalSegment,
}

/// Full evaluation summary over a grid of IoU thresholds.
#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// AP per class, aligned with `thresholds`. Only classes with at least
    /// one ground truth appear.
    pub per_class_ap: BTreeMap<u32, Vec<f64>>,
    /// Class-mean AP, aligned with `thresholds`.
    pub map_at: Vec<f64>,
    /// Mean of `map_at` over the grid.
    pub average_map: f64,
}

/// Average precision of single-class detections against single-class ground
/// truths (callers filter by class). Detections are ranked by descending
/// score (ties keep input order) and greedily matched: a detection is a true
/// positive iff its best same-video unmatched ground truth has IoU >=
/// `iou_threshold`. The area under the precision/recall curve uses the
/// all-points precision envelope. `None` when there are no ground truths.
pub fn average_precision(
    detections: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    if detections.is_empty() {
        return Some(0.0);
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });

    let mut gt_matched = vec![false; gts.len()];
    let mut tp = vec![false; order.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] || gt.video != det.video {
                continue;
            }
            let iou = segment_iou(det.segment, gt.segment);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= iou_threshold {
                gt_matched[gi] = true;
                tp[rank] = true;
            }
        }
    }

    let n_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(order.len());
    let mut recalls = Vec::with_capacity(order.len());
    let mut cum_tp = 0usize;
    for (rank, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precisions.push(cum_tp as f64 / (rank + 1) as f64);
        recalls.push(cum_tp as f64 / n_gt);
    }
    // precision envelope: running max from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Per-class AP at every threshold, the class-mean at every threshold, and
/// the grid mean. Classes with no ground truths are excluded entirely.
pub fn map_at(
    detections: &[EvalDetection],
    gts: &[EvalGroundTruth],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("threshold grid is empty".into()));
    }
    for &t in thresholds {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!(
                "IoU threshold {t} outside [0, 1]"
            )));
        }
    }
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class_ap: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &class in &classes {
        let class_dets: Vec<EvalDetection> = detections
            .iter()
            .filter(|d| d.class_id == class)
            .cloned()
            .collect();
        let class_gts: Vec<EvalGroundTruth> =
            gts.iter().filter(|g| g.class_id == class).cloned().collect();
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                average_precision(&class_dets, &class_gts, t)
                    .expect("class has ground truths by construction")
            })
            .collect();
        per_class_ap.insert(class, aps);
    }

    let map_at: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            if classes.is_empty() {
                0.0
            } else {
                per_class_ap.values().map(|aps| aps[ti]).sum::<f64>() / classes.len() as f64
            }
        })
        .collect();
    let average_map = map_at.iter().sum::<f64>() / map_at.len() as f64;
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        per_class_ap,
        map_at,
        average_map,
    })
}

/// A class-agnostic proposal attributed to a video.
#[derive(Clone, Debug)]
pub struct EvalProposal {
    pub video: String,
    pub segment: TemporalSegment,
    pub score: f64,
}

/// Proposal-stage quality: a proposal is correct iff its IoU with some
/// same-video ground truth strictly exceeds `iou_threshold`; precision is
/// the correct fraction of proposals, recall the fraction of ground truths
/// overlapped above the threshold by at least one proposal. Both are 0 for
/// an empty proposal set; recall is 0 when there are no ground truths.
pub fn proposal_pr(
    proposals: &[EvalProposal],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> (f64, f64) {
    if proposals.is_empty() {
        return (0.0, 0.0);
    }
    let mut correct = 0usize;
    let mut covered = vec![false; gts.len()];
    for p in proposals {
        let mut hit = false;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.video != p.video {
                continue;
            }
            if segment_iou(p.segment, gt.segment) > iou_threshold {
                hit = true;
                covered[gi] = true;
            }
        }
        if hit {
            correct += 1;
        }
    }
    let precision = correct as f64 / proposals.len() as f64;
    let recall = if gts.is_empty() {
        0.0
    } else {
        covered.iter().filter(|&&c| c).count() as f64 / gts.len() as f64
    };
    (precision, recall)
}

/// Published throughput figures for this detector family, measured on GPU
/// implementations with a much larger video backbone. Context only; they are
/// not comparable to this CPU toolkit and are never used as a target.
pub const REFERENCE_GPU_FPS: [(f64, &str); 2] = [
    (569.0, "Maxwell-generation GPU"),
    (1030.0, "Pascal-generation GPU"),
];

/// Result of the inference throughput benchmark.
#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    /// Median frames per second across repetitions.
    pub fps_median: f64,
    /// Median absolute deviation of the per-repetition fps.
    pub fps_mad: f64,
    pub per_rep_fps: Vec<f64>,
    pub frames_per_rep: usize,
    pub hardware: String,
}

/// Times full two-stage detection over `buffer`, `repetitions` times after
/// `warmup` untimed runs, and reports the median fps with its median
/// absolute deviation plus a hardware descriptor.
pub fn speed_benchmark(
    model: &Model,
    buffer: &Tensor<f32>,
    config: &DetectConfig,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchmarkReport> {
    if repetitions == 0 {
        return Err(Error::InvalidConfig("need at least one repetition".into()));
    }
    let frames = buffer.dims()[1];
    for _ in 0..warmup {
        detect_buffer(model, buffer, config)?;
    }
    let mut per_rep_fps = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let dets = detect_buffer(model, buffer, config)?;
        let dt = t0.elapsed().as_secs_f64().max(1e-9);
        std::hint::black_box(dets);
        per_rep_fps.push(frames as f64 / dt);
    }
    let fps_median = median(&per_rep_fps);
    let deviations: Vec<f64> = per_rep_fps.iter().map(|&f| (f - fps_median).abs()).collect();
    let fps_mad = median(&deviations);
    Ok(BenchmarkReport {
        fps_median,
        fps_mad,
        per_rep_fps,
        frames_per_rep: frames,
        hardware: hardware_descriptor(),
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Best-effort CPU description for benchmark reports.
pub fn hardware_descriptor() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".to_string());
    format!("{model}, {cores} logical cores (single-threaded run)")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(video: &str, class_id: u32, s: f64, e: f64, score: f64) -> EvalDetection {
        EvalDetection {
            video: video.into(),
            class_id,
            segment: TemporalSegment::new(s, e),
            score,
        }
    }

    fn gt(video: &str, class_id: u32, s: f64, e: f64) -> EvalGroundTruth {
        EvalGroundTruth {
            video: video.into(),
            class_id,
            segment: TemporalSegment::new(s, e),
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![gt("v", 1, 0.0, 10.0), gt("v", 1, 20.0, 30.0)];
        let dets = vec![det("v", 1, 0.0, 10.0, 0.9), det("v", 1, 20.0, 30.0, 0.8)];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_keeps_ap_one_via_envelope() {
        // one gt, two detections at IoU 0.9: first TP, second FP; with the
        // all-points envelope AP stays 1.0
        let gts = vec![gt("v", 1, 0.0, 10.0)];
        let dets = vec![det("v", 1, 0.0, 9.0, 0.9), det("v", 1, 0.0, 9.0, 0.8)];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_gt_five_detection_fixture() {
        // gts: [0,10], [20,30], [40,50], all class 1.
        // detections by descending score:
        //   0.9 [0,10]  TP (gt 1)
        //   0.8 [0,10]  FP (gt already matched)
        //   0.7 [21,31] TP (IoU 9/11 with gt 2)
        //   0.6 [40,45] TP (IoU exactly 0.5 with gt 3, >= threshold)
        //   0.5 [60,70] FP
        // precision: 1, 1/2, 2/3, 3/4, 3/5; recall: 1/3, 1/3, 2/3, 1, 1.
        // envelope precisions: 1, 3/4, 3/4, 3/4, 3/5.
        // AP = 1/3 * 1 + 1/3 * 3/4 + 1/3 * 3/4 = 5/6.
        let gts = vec![gt("v", 1, 0.0, 10.0), gt("v", 1, 20.0, 30.0), gt("v", 1, 40.0, 50.0)];
        let dets = vec![
            det("v", 1, 0.0, 10.0, 0.9),
            det("v", 1, 0.0, 10.0, 0.8),
            det("v", 1, 21.0, 31.0, 0.7),
            det("v", 1, 40.0, 45.0, 0.6),
            det("v", 1, 60.0, 70.0, 0.5),
        ];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {ap}");
    }

    #[test]
    fn no_gts_is_undefined_and_no_dets_is_zero() {
        assert!(average_precision(&[det("v", 1, 0.0, 1.0, 0.5)], &[], 0.5).is_none());
        let ap = average_precision(&[], &[gt("v", 1, 0.0, 1.0)], 0.5).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn matching_respects_video_boundaries() {
        let gts = vec![gt("a", 1, 0.0, 10.0)];
        // same span but in a different video: never a match
        let dets = vec![det("b", 1, 0.0, 10.0, 0.9)];
        let ap = average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn adding_false_positive_never_raises_ap() {
        let gts = vec![gt("v", 1, 0.0, 10.0), gt("v", 1, 20.0, 30.0)];
        let mut dets = vec![det("v", 1, 0.0, 10.0, 0.9)];
        let base = average_precision(&dets, &gts, 0.5).unwrap();
        dets.push(det("v", 1, 100.0, 110.0, 0.95));
        let with_fp = average_precision(&dets, &gts, 0.5).unwrap();
        assert!(with_fp <= base + 1e-12);
    }

    #[test]
    fn map_excludes_absent_classes_and_averages() {
        let gts = vec![gt("v", 1, 0.0, 10.0), gt("v", 3, 20.0, 30.0)];
        let dets = vec![
            det("v", 1, 0.0, 10.0, 0.9),
            // class 2 has no gts: must not affect the mean
            det("v", 2, 50.0, 60.0, 0.9),
        ];
        let res = map_at(&dets, &gts, &[0.5]).unwrap();
        assert_eq!(res.per_class_ap.len(), 2);
        assert!(res.per_class_ap.contains_key(&1));
        assert!(res.per_class_ap.contains_key(&3));
        // class 1 AP 1.0, class 3 AP 0.0 -> mAP 0.5
        assert!((res.map_at[0] - 0.5).abs() < 1e-12);
        assert!((res.average_map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn self_evaluation_is_perfect_on_threshold_grids() {
        let gts = vec![
            gt("a", 1, 0.0, 10.0),
            gt("a", 2, 5.0, 25.0),
            gt("b", 1, 3.0, 9.0),
        ];
        let dets: Vec<EvalDetection> = gts
            .iter()
            .map(|g| EvalDetection {
                video: g.video.clone(),
                class_id: g.class_id,
                segment: g.segment,
                score: 0.9,
            })
            .collect();
        let coarse: Vec<f64> = (1..=5).map(|i| i as f64 / 10.0).collect();
        let fine: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.05).collect();
        for grid in [coarse, fine] {
            let res = map_at(&dets, &gts, &grid).unwrap();
            assert!((res.average_map - 1.0).abs() < 1e-12);
            assert!(res.map_at.iter().all(|&m| (m - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn map_rejects_empty_or_invalid_grid() {
        assert!(map_at(&[], &[], &[]).is_err());
        assert!(map_at(&[], &[], &[1.5]).is_err());
    }

    fn prop(video: &str, s: f64, e: f64) -> EvalProposal {
        EvalProposal {
            video: video.into(),
            segment: TemporalSegment::new(s, e),
            score: 0.5,
        }
    }

    #[test]
    fn proposal_pr_perfect_and_mixed() {
        let gts = vec![gt("v", 1, 0.0, 10.0)];
        let (p, r) = proposal_pr(&[prop("v", 0.0, 10.0)], &gts, 0.7);
        assert_eq!((p, r), (1.0, 1.0));
        // one at IoU 0.8, one disjoint
        let (p2, r2) = proposal_pr(&[prop("v", 0.0, 8.0), prop("v", 50.0, 60.0)], &gts, 0.7);
        assert_eq!((p2, r2), (0.5, 1.0));
    }

    #[test]
    fn proposal_pr_empty_conventions() {
        let gts = vec![gt("v", 1, 0.0, 10.0)];
        assert_eq!(proposal_pr(&[], &gts, 0.7), (0.0, 0.0));
        assert_eq!(proposal_pr(&[prop("v", 0.0, 10.0)], &[], 0.7), (0.0, 0.0));
    }

    #[test]
    fn proposal_pr_threshold_is_strict() {
        let gts = vec![gt("v", 1, 0.0, 10.0)];
        // IoU exactly 0.7 must NOT count
        let (p, _) = proposal_pr(&[prop("v", 0.0, 7.0)], &gts, 0.7);
        assert_eq!(p, 0.0);
        let (p2, _) = proposal_pr(&[prop("v", 0.0, 7.1)], &gts, 0.7);
        assert!(p2 > 0.0);
    }

    #[test]
    fn median_of_even_and_odd_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn hardware_descriptor_is_nonempty() {
        let d = hardware_descriptor();
        assert!(!d.is_empty());
        assert!(d.contains("core"));
    }
}
