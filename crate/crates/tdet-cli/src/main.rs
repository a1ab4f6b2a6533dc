//! Command-line surface: synthetic data generation, training, detection,
//! evaluation, and an inference throughput benchmark. Every subcommand reads
//! an optional TOML settings file; flags override file values, which
//! override built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tdet::autodiff::Tensor;
use tdet::checkpoint;
use tdet::data::{
    feature_path, generate_synthetic, ground_truths, load_annotations, load_feature_video,
    SynthConfig, VideoRecord,
};
use tdet::eval::{map_at, proposal_pr, speed_benchmark, EvalDetection, EvalProposal, REFERENCE_GPU_FPS};
use tdet::geometry::TemporalSegment;
use tdet::inference::{
    detect_video, propose_video, read_detections, write_detections, DetectConfig, DetectionRecord,
};
use tdet::model::{Model, ModelConfig};
use tdet::train::{train, TrainConfig, TrainVideo};

#[derive(Parser)]
#[command(
    name = "tdet",
    about = "Temporal activity detection on feature videos",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset of feature videos and annotations.
    GenerateData(GenerateArgs),
    /// Train a detector on an annotated dataset and write a checkpoint.
    Train(TrainArgs),
    /// Run detection over a dataset with a trained checkpoint.
    Detect(DetectArgs),
    /// Score a detection file against ground-truth annotations.
    Eval(EvalArgs),
    /// Measure inference throughput.
    Bench(BenchArgs),
}

/// Settings shared across subcommands; every field can come from the TOML
/// file named by `--config` and be overridden by the matching flag.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    buffer_length: usize,
    anchor_scales: Vec<usize>,
    stride: usize,
    proposal_nms: f64,
    eval_iou: f64,
    pos_iou_hi: f64,
    pos_iou_lo: f64,
    cls_iou: f64,
    lambda: f64,
    lr: f64,
    seed: u64,
    epochs_initial: usize,
    epochs_decayed: usize,
    two_way: bool,
    score_floor: f64,
    max_proposals: usize,
    // dataset shape
    num_classes: usize,
    channels: usize,
    spatial: usize,
    fps: f64,
    // synthetic generation
    num_videos: usize,
    video_frames: usize,
    activities_min: usize,
    activities_max: usize,
    duration_min: f64,
    duration_max: f64,
    snr: f64,
    max_overlap_iou: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            buffer_length: 768,
            anchor_scales: vec![2, 4, 5, 6, 8, 9, 10, 12, 14, 16],
            stride: 8,
            proposal_nms: 0.7,
            eval_iou: 0.5,
            pos_iou_hi: 0.7,
            pos_iou_lo: 0.3,
            cls_iou: 0.5,
            lambda: 1.0,
            lr: 1e-4,
            seed: 0,
            epochs_initial: 10,
            epochs_decayed: 5,
            two_way: true,
            score_floor: 0.05,
            max_proposals: 300,
            num_classes: 5,
            channels: 8,
            spatial: 4,
            fps: 25.0,
            num_videos: 200,
            video_frames: 768,
            activities_min: 1,
            activities_max: 4,
            duration_min: 0.64,
            duration_max: 5.12,
            snr: 4.0,
            max_overlap_iou: 0.3,
        }
    }
}

/// Flags every subcommand accepts. `None` means "defer to the config file
/// or the default".
#[derive(Args, Clone, Debug)]
struct CommonArgs {
    /// TOML settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    buffer_length: Option<usize>,
    /// Comma-separated anchor scales in feature-map units.
    #[arg(long, value_delimiter = ',')]
    anchor_scales: Option<Vec<usize>>,
    /// Frames per feature-map unit; this architecture fixes it at 8.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    proposal_nms: Option<f64>,
    /// Evaluation IoU threshold; final NMS runs at this minus 0.1.
    #[arg(long)]
    eval_iou: Option<f64>,
    #[arg(long)]
    pos_iou_hi: Option<f64>,
    #[arg(long)]
    pos_iou_lo: Option<f64>,
    #[arg(long)]
    cls_iou: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading settings file {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing settings file {}", path.display()))?
            }
            None => Settings::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { s.$field = v; })*
            };
        }
        take!(
            buffer_length,
            anchor_scales,
            stride,
            proposal_nms,
            eval_iou,
            pos_iou_hi,
            pos_iou_lo,
            cls_iou,
            lambda,
            lr,
            seed,
            num_classes,
            channels
        );
        if s.stride != 8 {
            bail!(
                "stride {} is not supported: the backbone downsamples by 8",
                s.stride
            );
        }
        Ok(s)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory for feature videos and annotations.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_videos: Option<usize>,
    #[arg(long)]
    video_frames: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    activities_min: Option<usize>,
    #[arg(long)]
    activities_max: Option<usize>,
    #[arg(long)]
    duration_min: Option<f64>,
    #[arg(long)]
    duration_max: Option<f64>,
    #[arg(long)]
    max_overlap_iou: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Annotation index of the training split.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs_initial: Option<usize>,
    #[arg(long)]
    epochs_decayed: Option<usize>,
    /// Disable the reverse-pass training augmentation.
    #[arg(long)]
    one_way: bool,
    /// Optional JSON-lines file receiving one epoch log per line.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Annotation index naming the videos to process.
    #[arg(long)]
    data: PathBuf,
    /// Detection file to write (tab-separated).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long)]
    max_proposals: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Detection file produced by `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Annotation index with the ground truths.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated IoU thresholds; defaults to the single eval IoU.
    #[arg(long, value_delimiter = ',')]
    iou_grid: Option<Vec<f64>>,
    /// Optional JSON summary output.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Also report proposal precision/recall using this checkpoint.
    #[arg(long)]
    proposals_from: Option<PathBuf>,
    /// Objectness floor for the proposal precision/recall report.
    #[arg(long, default_value_t = 0.5)]
    proposal_floor: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to benchmark; a seeded fresh model is used when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
}

fn model_config(s: &Settings) -> Result<ModelConfig> {
    Ok(ModelConfig::new(
        s.channels,
        s.num_classes,
        s.anchor_scales.len(),
    )?)
}

fn detect_config(s: &Settings) -> Result<DetectConfig> {
    let mut cfg = DetectConfig::new(s.anchor_scales.clone(), s.eval_iou)?;
    cfg.proposal_nms = s.proposal_nms;
    cfg.score_floor = s.score_floor;
    cfg.max_proposals = s.max_proposals;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<(Vec<VideoRecord>, PathBuf)> {
    let records = load_annotations(path)
        .with_context(|| format!("loading annotations from {}", path.display()))?;
    if records.is_empty() {
        bail!("annotation index {} is empty", path.display());
    }
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((records, base))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let mut s = args.common.resolve()?;
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { s.$field = v; })*
        };
    }
    take!(
        num_videos,
        video_frames,
        snr,
        activities_min,
        activities_max,
        duration_min,
        duration_max,
        max_overlap_iou,
        fps
    );
    let config = SynthConfig {
        num_classes: s.num_classes,
        num_videos: s.num_videos,
        video_frames: (s.video_frames, s.video_frames),
        activities: (s.activities_min, s.activities_max),
        duration_s: (s.duration_min, s.duration_max),
        snr: s.snr,
        channels: s.channels,
        spatial: (s.spatial, s.spatial),
        fps: s.fps,
        max_overlap_iou: s.max_overlap_iou,
        rng_seed: s.seed,
    };
    let records = generate_synthetic(&config, &args.out)?;
    let n_act: usize = records.iter().map(|r| r.annotations.len()).sum();
    println!(
        "wrote {} videos ({} activities) to {}",
        records.len(),
        n_act,
        args.out.display()
    );
    Ok(())
}

fn load_train_videos(records: &[VideoRecord], base: &Path) -> Result<Vec<TrainVideo>> {
    records
        .iter()
        .map(|r| {
            let tensor = tdet::data::load_video_tensor(r, base)
                .with_context(|| format!("loading features for {}", r.id))?;
            let gts = r
                .annotations
                .iter()
                .map(|a| (r.span_frames(a), a.class_id))
                .collect();
            Ok(TrainVideo { tensor, gts })
        })
        .collect()
}

fn run_train(args: TrainArgs) -> Result<()> {
    let s = args.common.resolve()?;
    let (records, base) = load_dataset(&args.data)?;
    let dataset = load_train_videos(&records, &base)?;

    let mut config = TrainConfig::new(s.anchor_scales.clone());
    config.buffer_length = s.buffer_length;
    config.lr = s.lr;
    config.lambda = s.lambda;
    config.pos_iou_hi = s.pos_iou_hi;
    config.pos_iou_lo = s.pos_iou_lo;
    config.cls_iou = s.cls_iou;
    config.proposal_nms = s.proposal_nms;
    config.max_proposals = s.max_proposals;
    config.seed = s.seed;
    config.epochs_initial = args.epochs_initial.unwrap_or(s.epochs_initial);
    config.epochs_decayed = args.epochs_decayed.unwrap_or(s.epochs_decayed);
    config.two_way = !args.one_way && s.two_way;

    let mut model = Model::new(model_config(&s)?, s.seed)?;
    let logs = train(&mut model, &dataset, &config)?;
    for log in &logs {
        println!(
            "epoch {:>3}  lr {:.2e}  steps {:>5}  loss {:.4}  (proposal {:.4}/{:.4}, classifier {:.4}/{:.4})",
            log.epoch,
            log.lr,
            log.steps,
            log.mean_total,
            log.mean_prop_cls,
            log.mean_prop_reg,
            log.mean_cls_cls,
            log.mean_cls_reg
        );
    }
    if let Some(log_path) = &args.log {
        let mut text = String::new();
        for log in &logs {
            text.push_str(&serde_json::to_string(log)?);
            text.push('\n');
        }
        std::fs::write(log_path, text)?;
    }
    checkpoint::save(&args.out, model.params())?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn run_detect(args: DetectArgs) -> Result<()> {
    let mut s = args.common.resolve()?;
    if let Some(v) = args.score_floor {
        s.score_floor = v;
    }
    if let Some(v) = args.max_proposals {
        s.max_proposals = v;
    }
    let (records, base) = load_dataset(&args.data)?;
    let model = checkpoint::load_model(&args.model, model_config(&s)?)?;
    let config = detect_config(&s)?;

    let mut out = Vec::new();
    for r in &records {
        let video = load_feature_video(&feature_path(r, &base))?;
        for det in detect_video(&model, &video, &config)? {
            out.push(DetectionRecord {
                video: r.id.clone(),
                class_id: det.class_id,
                start_seconds: det.segment.start() / r.fps,
                end_seconds: det.segment.end() / r.fps,
                score: det.score,
            });
        }
    }
    write_detections(&args.out, &out)?;
    println!(
        "wrote {} detections over {} videos to {}",
        out.len(),
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let s = args.common.resolve()?;
    let (records, base) = load_dataset(&args.data)?;
    let gts = ground_truths(&records);
    let detections: Vec<EvalDetection> = read_detections(&args.detections)?
        .into_iter()
        .map(|d| EvalDetection {
            video: d.video,
            class_id: d.class_id,
            segment: TemporalSegment::new(d.start_seconds, d.end_seconds),
            score: d.score,
        })
        .collect();
    let grid = args.iou_grid.unwrap_or_else(|| vec![s.eval_iou]);
    let result = map_at(&detections, &gts, &grid)?;

    println!("{:<10} {}", "IoU", "mAP");
    for (t, m) in result.thresholds.iter().zip(&result.map_at) {
        println!("{:<10.2} {:.4}", t, m);
    }
    println!("average mAP over grid: {:.4}", result.average_map);
    println!();
    println!("per-class AP:");
    for (class, aps) in &result.per_class_ap {
        let row: Vec<String> = aps.iter().map(|a| format!("{a:.4}")).collect();
        println!("  class {:>3}: {}", class, row.join("  "));
    }

    if let Some(ckpt) = &args.proposals_from {
        let model = checkpoint::load_model(ckpt, model_config(&s)?)?;
        let config = detect_config(&s)?;
        let mut proposals = Vec::new();
        for r in &records {
            let video = load_feature_video(&feature_path(r, &base))?;
            for p in propose_video(&model, &video, &config)? {
                if p.score >= args.proposal_floor {
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
        let (precision, recall) = proposal_pr(&proposals, &gts, 0.7);
        println!();
        println!(
            "proposal stage at IoU 0.7 (objectness >= {}): precision {:.4}, recall {:.4} over {} proposals",
            args.proposal_floor,
            precision,
            recall,
            proposals.len()
        );
    }

    if let Some(path) = &args.summary {
        std::fs::write(path, serde_json::to_string_pretty(&result)?)?;
        println!("summary written to {}", path.display());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let s = args.common.resolve()?;
    let model = match &args.model {
        Some(path) => checkpoint::load_model(path, model_config(&s)?)?,
        None => Model::new(model_config(&s)?, s.seed)?,
    };
    let config = detect_config(&s)?;

    // seeded noise buffer; content does not matter for throughput
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s.seed);
    let dims = [s.channels, s.buffer_length, s.spatial, s.spatial];
    let n: usize = dims.iter().product();
    let buffer =
        Tensor::from_vec(&dims, (0..n).map(|_| rng.gen::<f32>() - 0.5).collect())?;

    let report = speed_benchmark(&model, &buffer, &config, args.repetitions, args.warmup)?;
    println!(
        "throughput: {:.1} fps median over {} repetitions of a {}-frame buffer",
        report.fps_median, args.repetitions, report.frames_per_rep
    );
    println!(
        "stability: median absolute deviation {:.1} fps ({:.1}% of median)",
        report.fps_mad,
        100.0 * report.fps_mad / report.fps_median
    );
    println!("hardware: {}", report.hardware);
    println!();
    println!("published reference figures for this detector family, for context only:");
    for (fps, hw) in REFERENCE_GPU_FPS {
        println!("  {fps:.0} fps ({hw})");
    }
    println!(
        "these were measured on GPU implementations with a far larger video backbone; \
         they are NOT comparable to this CPU toolkit and are not a target."
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().command {
        Command::GenerateData(args) => run_generate(args),
        Command::Train(args) => run_train(args),
        Command::Detect(args) => run_detect(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
    }
}
