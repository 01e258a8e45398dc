//! End-to-end tests of the `aep` binary: every subcommand is exercised
//! through a real process, checking exit codes, output files, and the
//! single-line error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aep_core::trace::{EpisodeTrace, TraceStep};

fn aep() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aep"))
}

fn run(args: &[&str]) -> Output {
    aep().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let out_dir = dir.join("out");
    let text = format!(
        "# tiny end-to-end run\n\
         env.frame_px = 32\n\
         env.seed = 3\n\
         env.event_dwell_min = 8\n\
         env.event_dwell_max = 16\n\
         perception.feat_h = 3\n\
         perception.feat_w = 3\n\
         perception.feat_d = 4\n\
         perception.hidden_dim = 6\n\
         dqn.batch_size = 8\n\
         dqn.buffer_capacity = 128\n\
         dqn.eps_decay_steps = 40\n\
         dqn.target_sync_every = 20\n\
         segmenter.window_n = 10\n\
         segmenter.nms_radius = 5\n\
         run.total_steps = 80\n\
         run.phase1_steps = 40\n\
         run.episode_horizon = 40\n\
         run.eval_episodes = 2\n\
         run.master_seed = 5\n\
         run.out_dir = {}\n",
        out_dir.display()
    );
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn mk_trace(le: &[f64], gt: &[usize]) -> EpisodeTrace {
    let steps = le
        .iter()
        .enumerate()
        .map(|(t, &v)| TraceStep {
            step: t as u64,
            action: 2,
            le: v,
            entropy: None,
            r_intrinsic: 0.0,
            r_extrinsic: 0.5,
            alpha_argmax: [0, 0],
            gt_boundary: gt.contains(&t),
            gt_event_kind: if t % 2 == 0 { "walk".into() } else { "turn".into() },
            target_visible: true,
        })
        .collect();
    EpisodeTrace { steps }
}

#[test]
fn end_to_end_pipeline_runs_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let out_dir = dir.path().join("out");

    // train
    let out = run(&["train", cfg_s]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let checkpoint = out_dir.join("checkpoint_final.bin");
    assert!(checkpoint.exists(), "missing final checkpoint");
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,eps,mean_q,td_loss,episode_reward\n"));
    assert_eq!(log.lines().count(), 81, "header plus one row per step");
    let ckpt_s = checkpoint.to_str().unwrap();

    // rollout
    let out = run(&["rollout", ckpt_s, cfg_s, "--episodes", "2", "--greedy"]);
    assert!(out.status.success(), "rollout failed: {}", stderr_of(&out));
    let trace0 = out_dir.join("rollouts/trace_ep000.jsonl");
    let trace1 = out_dir.join("rollouts/trace_ep001.jsonl");
    assert!(trace0.exists() && trace1.exists(), "missing rollout traces");
    assert!(out_dir.join("rollouts/trace_ep000.hidden.jsonl").exists());
    assert_eq!(EpisodeTrace::read_jsonl(&trace0).unwrap().len(), 40);

    // segment (surprise mode, then hidden mode via the sidecar)
    let report_path = dir.path().join("bounds.json");
    let out = run(&[
        "segment",
        trace0.to_str().unwrap(),
        "--window",
        "10",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "segment failed: {}", stderr_of(&out));
    let arr: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert!(arr.is_array(), "segment stdout must be a JSON array");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mode"], "prediction_error");
    assert_eq!(report["window_n"], 10);

    let out = run(&[
        "segment",
        trace0.to_str().unwrap(),
        "--window",
        "10",
        "--mode",
        "hidden",
        "--hidden",
        out_dir.join("rollouts/trace_ep000.hidden.jsonl").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "hidden segment failed: {}", stderr_of(&out));

    // summarize, fed by the segment report
    let out = run(&["summarize", trace0.to_str().unwrap(), report_path.to_str().unwrap()]);
    assert!(out.status.success(), "summarize failed: {}", stderr_of(&out));
    let keyframes: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert!(!keyframes.as_array().unwrap().is_empty(), "no keyframes reported");

    // evaluate both traces; hidden sidecars are picked up automatically,
    // so each trace yields both modes at three relaxed tolerances.
    let out = run(&[
        "evaluate",
        trace0.to_str().unwrap(),
        trace1.to_str().unwrap(),
        "--profile",
        "relaxed",
    ]);
    assert!(out.status.success(), "evaluate failed: {}", stderr_of(&out));
    let csv = stdout_of(&out);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "label,mode,tol_frames,precision,recall,f1,iou,frame_acc,ar,al"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 3, "2 traces x 2 modes x 3 tolerances");
    assert!(rows.iter().any(|r| r.contains(",prediction_error,")));
    assert!(rows.iter().any(|r| r.contains(",hidden_delta,")));

    let out = run(&["evaluate", trace0.to_str().unwrap(), "--profile", "strict"]);
    assert!(out.status.success());
    assert_eq!(stdout_of(&out).lines().count(), 1 + 2 * 4, "strict ladder has 4 tolerances");
}

#[test]
fn segment_on_a_constant_stream_prints_an_empty_array() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("errors.txt");
    std::fs::write(&stream, "1.0\n".repeat(100)).unwrap();
    let out = run(&["segment", stream.to_str().unwrap(), "--window", "10"]);
    assert!(out.status.success(), "segment failed: {}", stderr_of(&out));
    let value: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(value, serde_json::json!([]), "constant stream must yield no boundaries");
}

#[test]
fn unknown_flag_prints_usage_and_exits_two() {
    let out = run(&["segment", "whatever.txt", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("Usage"), "expected usage text, got: {err}");
}

#[test]
fn runtime_failures_are_single_line_errors_with_exit_one() {
    let out = run(&["train", "/definitely/absent.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    let trimmed = err.trim_end();
    assert!(trimmed.starts_with("error: "), "got: {err}");
    assert!(!trimmed.contains('\n'), "error must be a single line, got: {err}");
    assert!(trimmed.contains("absent.cfg"), "error must name the path, got: {err}");
}

#[test]
fn dump_frames_renders_the_scripted_sequence_as_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let script = dir.path().join("actions.txt");
    std::fs::write(&script, "forward\n4\nstop\n").unwrap();
    let frames = dir.path().join("frames");
    let out = run(&[
        "dump-frames",
        cfg.to_str().unwrap(),
        script.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "dump-frames failed: {}", stderr_of(&out));
    for i in 0..4 {
        let bytes = std::fs::read(frames.join(format!("frame_{i:04}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"), "frame {i} is not a 32x32 PGM");
    }
    assert!(!frames.join("frame_0004.pgm").exists(), "exactly 4 frames expected");

    // A nonsense action must fail with a single-line error.
    std::fs::write(&script, "sideways\n").unwrap();
    let out = run(&[
        "dump-frames",
        cfg.to_str().unwrap(),
        script.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("error: "));
}

#[test]
fn summarize_reports_exact_per_segment_argmin_keyframes() {
    let dir = tempfile::tempdir().unwrap();
    let le = [5.0, 1.0, 3.0, 2.0, 9.0, 4.0, 8.0, 0.5, 7.0, 6.0];
    let trace_path = dir.path().join("toy.jsonl");
    mk_trace(&le, &[5]).write_jsonl(&trace_path).unwrap();
    let bounds_path = dir.path().join("bounds.json");
    std::fs::write(&bounds_path, "[5]").unwrap();

    let out = run(&["summarize", trace_path.to_str().unwrap(), bounds_path.to_str().unwrap()]);
    assert!(out.status.success(), "summarize failed: {}", stderr_of(&out));
    let keyframes: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    let arr = keyframes.as_array().unwrap();
    assert_eq!(arr.len(), 2);
    assert_eq!(arr[0]["keyframe"], 1, "segment [0,5) minimises surprise at frame 1");
    assert_eq!(arr[1]["keyframe"], 7, "segment [5,10) minimises surprise at frame 7");
    assert_eq!(arr[0]["le"], 1.0);
    assert_eq!(arr[1]["le"], 0.5);
}

#[test]
fn evaluate_reads_ground_truth_from_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let le: Vec<f64> = (0..60).map(|i| 1.0 + 0.001 * i as f64).collect();
    let trace_path = dir.path().join("trace_a.jsonl");
    mk_trace(&le, &[]).write_jsonl(&trace_path).unwrap();
    let gt_dir = dir.path().join("gt");
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::write(gt_dir.join("trace_a.gt.json"), "[20, 40]").unwrap();

    let out = run(&[
        "evaluate",
        trace_path.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
        "--profile",
        "relaxed",
    ]);
    assert!(out.status.success(), "evaluate failed: {}", stderr_of(&out));
    let csv = stdout_of(&out);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "one mode, three tolerances: {csv}");
    assert!(rows.iter().all(|r| r.starts_with("trace_a,prediction_error,")));

    // A missing ground-truth file must name the path it looked for.
    let lonely = dir.path().join("trace_b.jsonl");
    mk_trace(&le, &[]).write_jsonl(&lonely).unwrap();
    let out = run(&[
        "evaluate",
        lonely.to_str().unwrap(),
        "--gt",
        gt_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("trace_b.gt.json"));
}
