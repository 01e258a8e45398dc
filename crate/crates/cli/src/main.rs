//! `aep` — command-line front end for the active event perception loop.
//!
//! Subcommands cover the full experiment cycle: `train` a controller,
//! `rollout` evaluation episodes from a checkpoint, `segment` a surprise
//! stream into events, `summarize` segments into keyframes, `evaluate`
//! traces against ground truth, and `dump-frames` for visual inspection.
//!
//! Every subcommand exits 0 on success and prints a single-line
//! `error: ...` message to stderr otherwise (runtime failures exit 1;
//! malformed command lines exit 2 with usage text).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aep_core::checkpoint::Snapshot;
use aep_core::config::FullConfig;
use aep_core::env::{Action, Env, write_pgm};
use aep_core::error::{Error, Result};
use aep_core::eval::{
    boundary_prf, frame_accuracy, metrics_csv_string, segment_iou, tracking_metrics, MetricsRow,
    RELAXED_TOLERANCES, STRICT_TOLERANCES,
};
use aep_core::events::{
    detect_boundaries, hidden_delta_signal, segments_from_boundaries, summarize, BoundaryReport,
    Segment, SegmentMode, SegmenterConfig,
};
use aep_core::harness::{rollout_many, run_training, seeds, Policy, RolloutSpec};
use aep_core::trace::{read_hidden_jsonl, write_hidden_jsonl, EpisodeTrace};

#[derive(Parser)]
#[command(
    name = "aep",
    version,
    about = "Active event perception: train, roll out, segment, summarize, evaluate."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the two-phase training loop described by a config file.
    Train(TrainArgs),
    /// Play evaluation episodes from a checkpoint and write JSONL traces.
    Rollout(RolloutArgs),
    /// Detect event boundaries in a trace or plain-text surprise stream.
    Segment(SegmentArgs),
    /// Pick the least-surprising keyframe of every segment of a trace.
    Summarize(SummarizeArgs),
    /// Score traces against ground-truth boundaries as a metrics CSV.
    Evaluate(EvaluateArgs),
    /// Render the frames produced by a scripted action sequence as PGM.
    DumpFrames(DumpFramesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`section.key = value` lines).
    config: PathBuf,
    /// Extra `section.key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override `run.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override `run.master_seed`.
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Args)]
struct RolloutArgs {
    /// Checkpoint produced by `train`.
    checkpoint: PathBuf,
    /// Config file (environment and horizon are taken from it).
    config: PathBuf,
    /// Number of episodes to play.
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// Act greedily on the learned Q-values (default: uniform random).
    #[arg(long, conflicts_with = "policy")]
    greedy: bool,
    /// Explicit policy: greedy, random, oracle, or an action name.
    #[arg(long)]
    policy: Option<String>,
    /// Base seed for episode generation (default: run.master_seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Where traces go (default: <run.out_dir>/rollouts).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// A JSONL trace from `rollout`, or a plain text file with one
    /// surprise value per line.
    input: PathBuf,
    /// Trailing entropy window length.
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// Boundary signal: `le` (prediction error) or `hidden`
    /// (controller hidden-state change; needs --hidden for traces).
    #[arg(long, default_value = "le")]
    mode: String,
    /// Hidden-state sidecar JSONL (required for --mode hidden on traces).
    #[arg(long)]
    hidden: Option<PathBuf>,
    /// Strict-local-maximum suppression radius.
    #[arg(long)]
    nms_radius: Option<usize>,
    /// Minimum entropy prominence of a reported peak, in nats.
    #[arg(long)]
    min_prominence: Option<f64>,
    /// Also write a full segmentation report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// A JSONL trace from `rollout`.
    trace: PathBuf,
    /// Boundary file: a segmentation report, an array of boundary
    /// objects, or a plain JSON array of frame indices.
    boundaries: PathBuf,
    /// Also write the keyframes JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSONL traces from `rollout`.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Directory of `<trace-stem>.gt.json` boundary files; without it,
    /// ground truth is read from the traces' inline gt_ fields.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Tolerance ladder: `strict` (2-15 frames) or `relaxed` (15-45).
    #[arg(long, default_value = "relaxed")]
    profile: String,
    /// Trailing entropy window length.
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// Strict-local-maximum suppression radius.
    #[arg(long)]
    nms_radius: Option<usize>,
    /// Minimum entropy prominence of a reported peak, in nats.
    #[arg(long)]
    min_prominence: Option<f64>,
    /// Also write the metrics CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpFramesArgs {
    /// Config file; the environment section drives rendering.
    config: PathBuf,
    /// Action script: one action name or index per line.
    actions: PathBuf,
    /// Output directory (default: <run.out_dir>/frames).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `env.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Rollout(a) => cmd_rollout(a),
        Cmd::Segment(a) => cmd_segment(a),
        Cmd::Summarize(a) => cmd_summarize(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::DumpFrames(a) => cmd_dump_frames(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = FullConfig::load(&a.config)?;
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = a.out_dir {
        cfg.run.out_dir = d;
    }
    if let Some(s) = a.master_seed {
        cfg.run.master_seed = s;
    }
    cfg.validate()?;
    let out = run_training(&cfg.env, &cfg.perception, &cfg.dqn, &cfg.run)?;
    println!(
        "trained {} steps ({} episodes) under master seed {}",
        cfg.run.total_steps, out.episodes_completed, cfg.run.master_seed
    );
    if out.predictor_skipped_updates > 0 {
        println!(
            "note: {} perception updates skipped on non-finite gradients",
            out.predictor_skipped_updates
        );
    }
    println!("log: {}", out.log_path.display());
    println!("checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> Result<()> {
    if a.episodes == 0 {
        return Err(Error::Usage("--episodes must be >= 1".into()));
    }
    let cfg = FullConfig::load(&a.config)?;
    cfg.validate()?;
    let snapshot = Snapshot::load(&a.checkpoint)?;
    let policy = match &a.policy {
        Some(p) => Policy::parse(p)?,
        None if a.greedy => Policy::Greedy,
        None => Policy::Random,
    };
    let master = a.seed.unwrap_or(cfg.run.master_seed);
    let specs: Vec<RolloutSpec> = (0..a.episodes)
        .map(|i| RolloutSpec { seed: seeds::derive(master, &format!("rollout/{i}")), policy })
        .collect();
    let rollouts =
        rollout_many(&snapshot, &cfg.env, cfg.run.horizon, cfg.segmenter.window_n, &specs)?;
    let dir = a.out_dir.unwrap_or_else(|| cfg.run.out_dir.join("rollouts"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, r) in rollouts.iter().enumerate() {
        let trace_path = dir.join(format!("trace_ep{i:03}.jsonl"));
        let hidden_path = dir.join(format!("trace_ep{i:03}.hidden.jsonl"));
        r.trace.write_jsonl(&trace_path)?;
        write_hidden_jsonl(&hidden_path, &r.hiddens)?;
        let n = r.trace.len().max(1) as f64;
        let mean_int = r.trace.steps.iter().map(|s| s.r_intrinsic).sum::<f64>() / n;
        let mean_ext = r.trace.steps.iter().map(|s| s.r_extrinsic).sum::<f64>() / n;
        println!(
            "episode {i} ({}): {} steps, mean r_int {mean_int:.4}, mean r_ext {mean_ext:.4} -> {}",
            policy.label(),
            r.trace.len(),
            trace_path.display()
        );
    }
    Ok(())
}

fn segmenter_from(
    window: Option<usize>,
    nms_radius: Option<usize>,
    min_prominence: Option<f64>,
) -> SegmenterConfig {
    let mut cfg = SegmenterConfig::default();
    if let Some(w) = window {
        cfg.window_n = w;
    }
    if let Some(r) = nms_radius {
        cfg.nms_radius = r;
    }
    if let Some(p) = min_prominence {
        cfg.min_prominence = p;
    }
    cfg
}

fn parse_mode(s: &str) -> Result<SegmentMode> {
    match s {
        "le" => Ok(SegmentMode::PredictionError),
        "hidden" => Ok(SegmentMode::HiddenDelta),
        other => SegmentMode::parse(other),
    }
}

/// Loads the boundary signal: traces yield their surprise stream (or the
/// hidden-state change stream in `hidden` mode); plain text files are the
/// signal itself, one value per line.
fn load_signal(input: &Path, mode: SegmentMode, hidden: Option<&Path>) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    if text.trim_start().starts_with('{') {
        let trace = EpisodeTrace::from_jsonl_str(&text)?;
        match mode {
            SegmentMode::PredictionError => Ok(trace.le_stream()),
            SegmentMode::HiddenDelta => {
                let sidecar = hidden.ok_or_else(|| {
                    Error::Usage(
                        "--mode hidden on a trace needs --hidden <sidecar.jsonl>".into(),
                    )
                })?;
                hidden_delta_signal(&read_hidden_jsonl(sidecar)?)
            }
        }
    } else {
        let mut values = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.starts_with('#') {
                continue;
            }
            values.push(tok.parse::<f64>().map_err(|e| {
                Error::Data(format!(
                    "{}:{}: bad surprise value `{tok}`: {e}",
                    input.display(),
                    idx + 1
                ))
            })?);
        }
        Ok(values)
    }
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let cfg = segmenter_from(a.window, a.nms_radius, a.min_prominence);
    let signal = load_signal(&a.input, mode, a.hidden.as_deref())?;
    let boundaries = detect_boundaries(&signal, &cfg)?;
    let report = BoundaryReport {
        mode,
        window_n: cfg.window_n,
        nms_radius: cfg.nms_radius,
        min_prominence: cfg.min_prominence,
        boundaries,
    };
    println!("{}", serde_json::to_string_pretty(&report.boundaries)?);
    if let Some(path) = &a.out {
        let full = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, full).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Accepts any of the boundary shapes this tool emits: a full report
/// object, an array of `{t, entropy}` objects, or a bare array of frames.
fn boundaries_from_json(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let items = match &value {
        serde_json::Value::Object(map) => map.get("boundaries").and_then(|b| b.as_array()),
        serde_json::Value::Array(items) => Some(items),
        _ => None,
    };
    items
        .and_then(|items| {
            items
                .iter()
                .map(|item| match item {
                    serde_json::Value::Number(n) => n.as_u64().map(|x| x as usize),
                    serde_json::Value::Object(m) => {
                        m.get("t").and_then(|t| t.as_u64()).map(|x| x as usize)
                    }
                    _ => None,
                })
                .collect::<Option<Vec<usize>>>()
        })
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: expected a segmentation report, an array of boundary objects, \
                 or an array of frame indices",
                path.display()
            ))
        })
}

fn cmd_summarize(a: SummarizeArgs) -> Result<()> {
    let trace = EpisodeTrace::read_jsonl(&a.trace)?;
    let le = trace.le_stream();
    let boundaries = boundaries_from_json(&a.boundaries)?;
    let segments = segments_from_boundaries(le.len(), &boundaries)?;
    let keyframes = summarize(&segments, &le)?;
    let json = serde_json::to_string_pretty(&keyframes)?;
    println!("{json}");
    if let Some(path) = &a.out {
        std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Frame index -> index of the segment containing it.
fn segment_index_labels(segments: &[Segment], total: usize) -> Vec<usize> {
    let mut labels = vec![0usize; total];
    for (idx, seg) in segments.iter().enumerate() {
        for frame in seg.start..seg.end {
            labels[frame] = idx;
        }
    }
    labels
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let tolerances: Vec<usize> = match a.profile.as_str() {
        "strict" => STRICT_TOLERANCES.to_vec(),
        "relaxed" => RELAXED_TOLERANCES.to_vec(),
        other => {
            return Err(Error::Usage(format!(
                "unknown profile `{other}` (expected strict or relaxed)"
            )))
        }
    };
    let cfg = segmenter_from(a.window, a.nms_radius, a.min_prominence);
    let mut rows = Vec::new();
    for trace_path in &a.traces {
        // Shell globs like `trace_ep*.jsonl` also match the hidden-state
        // sidecars; those are picked up via their parent trace instead.
        if trace_path.to_string_lossy().ends_with(".hidden.jsonl") {
            continue;
        }
        let trace = EpisodeTrace::read_jsonl(trace_path)?;
        let label = trace_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| trace_path.display().to_string());
        let total = trace.len();
        let gt_bounds = match &a.gt {
            Some(dir) => {
                let gt_path = dir.join(format!("{label}.gt.json"));
                boundaries_from_json(&gt_path)?
            }
            None => trace.gt_boundaries(),
        };
        let gt_segments = segments_from_boundaries(total, &gt_bounds)?;
        let tracking = tracking_metrics(&[trace.extrinsic_rewards()]);

        // Signals to score: surprise always; hidden-state change when the
        // rollout's sidecar file sits next to the trace.
        let mut signals = vec![(SegmentMode::PredictionError, trace.le_stream())];
        let sidecar = trace_path.with_extension("hidden.jsonl");
        if sidecar.exists() {
            signals.push((
                SegmentMode::HiddenDelta,
                hidden_delta_signal(&read_hidden_jsonl(&sidecar)?)?,
            ));
        }

        for (mode, signal) in &signals {
            let pred: Vec<usize> =
                detect_boundaries(signal, &cfg)?.iter().map(|b| b.t).collect();
            let pred_segments = segments_from_boundaries(total, &pred)?;
            let iou = segment_iou(&pred_segments, &gt_segments, total)?;
            // Frame labels: inline ground truth carries event kinds; a gt
            // directory only carries boundaries, so segment ids stand in.
            let frame_acc = match &a.gt {
                None => frame_accuracy(&pred_segments, &trace.gt_labels())?,
                Some(_) => {
                    let gt_labels = segment_index_labels(&gt_segments, total);
                    frame_accuracy(&pred_segments, &gt_labels)?
                }
            };
            for &tol in &tolerances {
                let prf = boundary_prf(&pred, &gt_bounds, tol);
                rows.push(MetricsRow {
                    label: label.clone(),
                    mode: mode.as_str().to_string(),
                    tol_frames: tol,
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                    iou,
                    frame_acc,
                    avg_return: tracking.avg_return,
                    avg_length: tracking.avg_length,
                });
            }
        }
    }
    let csv = metrics_csv_string(&rows);
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_dump_frames(a: DumpFramesArgs) -> Result<()> {
    let mut cfg = FullConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.env.seed = s;
    }
    cfg.env.validate()?;
    let text = std::fs::read_to_string(&a.actions).map_err(|e| Error::io(&a.actions, e))?;
    let mut actions = Vec::new();
    for line in text.lines() {
        let tok = line.trim();
        if tok.is_empty() || tok.starts_with('#') {
            continue;
        }
        actions.push(Action::parse(tok)?);
    }
    let dir = a.out.unwrap_or_else(|| cfg.run.out_dir.join("frames"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut env = Env::new(&cfg.env)?;
    write_pgm(&dir.join("frame_0000.pgm"), &env.render())?;
    for (i, action) in actions.iter().enumerate() {
        let (obs, _) = env.step(*action);
        write_pgm(&dir.join(format!("frame_{:04}.pgm", i + 1)), &obs)?;
    }
    println!("wrote {} frames to {}", actions.len() + 1, dir.display());
    Ok(())
}
