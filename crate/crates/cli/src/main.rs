use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trackkit_core::bench::{run_bench, BenchConfig, BenchReport};
use trackkit_core::io::{
    apply_tracker_config, format_mot, group_detections, parse_config, parse_mot, read_embeddings, rows_to_sequence,
    sequence_to_rows, write_embeddings, EmbeddingMatrix, MotRow,
};
use trackkit_core::metrics::{evaluate_clear, MotReport, DEFAULT_IOU_THRESHOLD};
use trackkit_core::simulate::{generate_scenario, MotionPattern, ScenarioConfig};
use trackkit_core::{tracker_run, TrackerConfig};

mod checks;

/// Bad input or invocation; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "trackkit", version, about = "Online multi-object tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track detections and write a hypothesis MOT file.
    Track(TrackArgs),
    /// Score a hypothesis file against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic scenario: gt.txt, dets.txt and embs.jdeb.
    Simulate(SimulateArgs),
    /// Measure association-only throughput at several target densities.
    Bench(BenchArgs),
    /// Numerically check the embedding losses.
    LossesCheck(LossesCheckArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// Detection rows in MOT format (id -1).
    #[arg(long)]
    dets: PathBuf,
    /// JDEB embedding file, one row per detection row.
    #[arg(long)]
    embs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// key=value tracker configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    confirm_frames: Option<u32>,
    #[arg(long)]
    max_lost: Option<u32>,
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long)]
    max_cost: Option<f64>,
    #[arg(long)]
    min_conf: Option<f64>,
    /// Use motion alone (lambda = 0); no embedding file is needed.
    #[arg(long)]
    motion_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    res: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    targets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    p_miss: f64,
    /// Expected false positives per frame.
    #[arg(long, default_value_t = 0.0)]
    fp_rate: f64,
    /// Gaussian box jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    embed_noise: f64,
    /// Targets move in pairs that cross halfway through.
    #[arg(long)]
    crossing: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated numbers of targets per frame.
    #[arg(long, value_delimiter = ',', default_value = "10,30,60")]
    densities: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    /// Expected false positives per frame.
    #[arg(long, default_value_t = 1.0)]
    fp_rate: f64,
}

#[derive(Args)]
struct LossesCheckArgs {
    #[arg(long, default_value_t = 10_000)]
    batches: usize,
    /// Points per loss for the finite-difference check.
    #[arg(long, default_value_t = 100)]
    grad_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_mot(path: &Path) -> Result<Vec<MotRow>> {
    let text = read_text(path)?;
    parse_mot(&text).with_context(|| format!("parsing {}", path.display()))
}

fn tracker_config(args: &TrackArgs) -> Result<TrackerConfig> {
    let mut cfg = TrackerConfig::default();
    if let Some(path) = &args.config {
        let entries = parse_config(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
        apply_tracker_config(&entries, &mut cfg).with_context(|| format!("applying {}", path.display()))?;
    }
    let flags = [
        (args.lambda, &mut cfg.lambda),
        (args.alpha, &mut cfg.alpha_ema),
        (args.gate, &mut cfg.gate),
        (args.max_cost, &mut cfg.max_cost),
        (args.min_conf, &mut cfg.min_confidence),
    ];
    for (flag, slot) in flags {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = args.confirm_frames {
        cfg.confirm_frames = v;
    }
    if let Some(v) = args.max_lost {
        cfg.max_lost_frames = v;
    }
    cfg.motion_only |= args.motion_only;
    cfg.validate()
        .map_err(|e| usage(format!("invalid tracker configuration: {e}")))?;
    Ok(cfg)
}

fn track(args: &TrackArgs) -> Result<()> {
    let cfg = tracker_config(args)?;
    let rows = read_mot(&args.dets)?;
    let embeddings = match (&args.embs, cfg.motion_only) {
        (_, true) => None,
        (Some(path), false) => {
            let file = fs::File::open(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let m = read_embeddings(std::io::BufReader::new(file))
                .with_context(|| format!("reading {}", path.display()))?;
            Some(m)
        }
        (None, false) => return Err(usage("--embs is required unless --motion-only is set")),
    };
    let frames = group_detections(&rows, embeddings.as_ref())?;
    let result = tracker_run(cfg, &frames)?;
    fs::write(&args.out, format_mot(&sequence_to_rows(&result)))
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.iou) || args.iou == 0.0 {
        return Err(usage(format!("--iou must lie in (0, 1], got {}", args.iou)));
    }
    let mut gt = rows_to_sequence(&read_mot(&args.gt)?).with_context(|| format!("reading {}", args.gt.display()))?;
    let mut hyp = rows_to_sequence(&read_mot(&args.res)?).with_context(|| format!("reading {}", args.res.display()))?;
    if let (Some(g), Some(h)) = (gt.frame_range(), hyp.frame_range()) {
        if g != h {
            let (lo, hi) = (g.0.max(h.0), g.1.min(h.1));
            if lo > hi {
                bail!(
                    "ground truth frames {}..={} and result frames {}..={} do not overlap",
                    g.0,
                    g.1,
                    h.0,
                    h.1
                );
            }
            eprintln!(
                "warning: ground truth covers frames {}..={}, result covers {}..={}; evaluating {lo}..={hi}",
                g.0, g.1, h.0, h.1
            );
            gt = gt.restricted(lo, hi);
            hyp = hyp.restricted(lo, hi);
        }
    }
    let report = evaluate_clear(&gt, &hyp, args.iou)?;
    println!("{}", MotReport::header());
    println!("{}", report.row());
    if let Some(path) = &args.csv {
        fs::write(path, format!("{}\n{}\n", MotReport::csv_header(), report.csv_row()))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = ScenarioConfig {
        n_frames: args.frames,
        n_targets: args.targets,
        p_miss: args.p_miss,
        fp_rate: args.fp_rate,
        box_jitter_std: args.jitter,
        embed_dim: args.embed_dim,
        embed_noise_std: args.embed_noise,
        motion: if args.crossing {
            MotionPattern::Crossing
        } else {
            MotionPattern::Random
        },
        seed: args.seed,
        ..ScenarioConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let scenario = generate_scenario(&cfg)?;

    let mut det_rows = Vec::with_capacity(scenario.detection_count());
    let mut embs = Vec::with_capacity(scenario.detection_count());
    for (k, dets) in scenario.frames.iter().enumerate() {
        for d in dets {
            det_rows.push(MotRow::new(k as u64 + 1, -1, d.bbox, d.confidence));
            embs.push(d.embedding.clone().expect("simulated detections carry embeddings"));
        }
    }
    let embs = if embs.is_empty() {
        EmbeddingMatrix::new(args.embed_dim, Vec::new())?
    } else {
        EmbeddingMatrix::from_rows(&embs)?
    };

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = args.out_dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    };
    write("gt.txt", format_mot(&sequence_to_rows(&scenario.gt)).as_bytes())?;
    write("dets.txt", format_mot(&det_rows).as_bytes())?;
    let mut buf = Vec::new();
    write_embeddings(&mut buf, &embs)?;
    write("embs.jdeb", &buf)?;
    println!(
        "{} frames, {} targets, {} detections written to {}",
        args.frames,
        args.targets,
        det_rows.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    if args.densities.is_empty() || args.densities.contains(&0) {
        return Err(usage("--densities needs positive target counts"));
    }
    println!("{}", BenchReport::header());
    for &targets in &args.densities {
        let r = run_bench(&BenchConfig {
            targets,
            frames: args.frames,
            seed: args.seed,
            embed_dim: args.embed_dim,
            fp_rate: args.fp_rate,
            ..BenchConfig::default()
        })?;
        println!("{}", r.row());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use trackkit_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Usage(_) | E::Format { .. } | E::Io(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Bench(a) => bench(a),
        Command::LossesCheck(a) => checks::losses_check(a.batches, a.grad_points, a.seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
