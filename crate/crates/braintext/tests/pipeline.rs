//! End-to-end checks of the `braintext` binary: every command runs as a
//! real process, exit codes and artifacts included.

use std::path::Path;
use std::process::{Command, Output};

use braintext::cli::{InferReport, WindowRow};
use braintext::eval::MetricReport;
use braintext::infer::{StopReason, StopStrategy, WindowDecodeRecord};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_braintext"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn braintext");
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_expect_code(args: &[&str], code: i32) -> String {
    let out = bin().args(args).output().expect("spawn braintext");
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?} exited {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{path:?}: {e}"))
}

/// Small but real pipeline config: two stories, a couple of minutes of
/// simulated signal, and a one-layer stack throughout.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
[synth]
seed = 9
vocab_size = 20
n_stories = 2
story_seconds = 120.0
tr_seconds = 2.0
n_voxels = 8
noise_sigma = 0.3

[windowing]
window_seconds = 20.0
frame_offset_trs = 2
holdout_windows = 4

[train]
fine_tune_lm = false
inference_strategy = "special_token"
batch_size = 8
lr = 2e-3
epochs = 3
seed = 9
val_fraction = 0.0
d_enc = 12
prompt_len = 2
mapper_width = 12
mapper_layers = 1
mapper_heads = 2
mapper_max_in = 48

[train.lm]
d_model = 16
n_layers = 1
n_heads = 2
max_seq = 64

[infer]
ridge_reg = 1e-2
"#,
    )
    .unwrap();
    path
}

fn manifest_without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = read(path);
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_unix_secs");
    obj.remove("wall_clock_secs");
    v
}

#[test]
fn prepare_writes_windows_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    // defaults except size: window tiling with no offset keeps every
    // window, so the count is exactly n_stories * (story_seconds / 20)
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "[synth]\nn_stories = 2\nstory_seconds = 60.0\nn_voxels = 6\nvocab_size = 15\n",
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(&[
            "prepare",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }

    let rows: Vec<WindowRow> = read(&out_a.join("windows.json"));
    assert_eq!(rows.len(), 2 * 3, "2 stories x floor(60 / 20) windows");
    for r in &rows {
        assert!(r.special_token_target.starts_with("= "));
        assert_eq!(
            r.special_token_target.matches('$').count(),
            r.n_tr,
            "one TR mark per TR"
        );
        assert!(!r.word_rate_target.contains('='));
        assert!(!r.word_rate_target.contains('$'));
    }

    // reruns are byte-identical apart from the manifest's timing fields
    for f in ["windows.json", "config.json"] {
        assert_eq!(
            std::fs::read(out_a.join(f)).unwrap(),
            std::fs::read(out_b.join(f)).unwrap(),
            "{f} differs between reruns"
        );
    }
    assert_eq!(
        manifest_without_timing(&out_a.join("run_manifest.json")),
        manifest_without_timing(&out_b.join("run_manifest.json"))
    );
}

#[test]
fn missing_data_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_expect_code(
        &[
            "train",
            "--data",
            "/definitely/not/here",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ],
        3,
    );
    assert!(
        stderr.contains("not a prepared data directory"),
        "stderr: {stderr}"
    );
}

#[test]
fn pretrained_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_expect_code(
        &[
            "prepare",
            "--backend",
            "pretrained",
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ],
        2,
    );
    assert!(stderr.contains("not available"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let base = dir.path().join("base");
    let dec = dir.path().join("dec");
    let p = |p: &Path| p.to_str().unwrap().to_string();

    run_ok(&["prepare", "--config", cfg, "--out", &p(&data)]);
    run_ok(&[
        "train", "--config", cfg, "--data", &p(&data), "--stage", "baseline", "--out", &p(&base),
    ]);
    run_ok(&[
        "train", "--config", cfg, "--data", &p(&data), "--stage", "decoder", "--baseline",
        &p(&base), "--out", &p(&dec),
    ]);

    // decoder training demands a compatible stage-1 checkpoint
    let stderr = run_expect_code(
        &[
            "train", "--config", cfg, "--data", &p(&data), "--stage", "decoder", "--baseline",
            &p(&base), "--prompt-length", "3", "--out", &p(&dir.path().join("bad")),
        ],
        2,
    );
    assert!(stderr.contains("prompt_len"), "stderr: {stderr}");

    // decoding the holdout split, twice, is byte-identical
    let inf_a = dir.path().join("inf_a");
    let inf_b = dir.path().join("inf_b");
    for out in [&inf_a, &inf_b] {
        run_ok(&[
            "infer", "--config", cfg, "--ckpt", &p(&dec), "--data", &p(&data), "--out", &p(out),
        ]);
    }
    assert_eq!(
        std::fs::read(inf_a.join("infer_report.json")).unwrap(),
        std::fs::read(inf_b.join("infer_report.json")).unwrap()
    );
    let report: InferReport = read(&inf_a.join("infer_report.json"));
    assert_eq!(report.mode, "brain_to_text");
    assert_eq!(report.rows.len(), 4, "holdout_windows = 4");
    for r in &report.rows {
        assert!(!r.reference.is_empty());
        assert!(!r.reference.contains('$'));
    }

    // a stage-1 checkpoint decodes text-to-text
    let inf_t = dir.path().join("inf_t");
    run_ok(&[
        "infer", "--config", cfg, "--ckpt", &p(&base), "--data", &p(&data), "--out", &p(&inf_t),
    ]);
    let t_report: InferReport = read(&inf_t.join("infer_report.json"));
    assert_eq!(t_report.mode, "text_to_text");

    // scoring is model-free and byte-identical across reruns
    let ev_a = dir.path().join("ev_a");
    let ev_b = dir.path().join("ev_b");
    for out in [&ev_a, &ev_b] {
        run_ok(&[
            "eval",
            "--report",
            &p(&inf_a.join("infer_report.json")),
            "--out",
            &p(out),
        ]);
    }
    assert_eq!(
        std::fs::read(ev_a.join("metric_report.json")).unwrap(),
        std::fs::read(ev_b.join("metric_report.json")).unwrap()
    );
    let metrics: MetricReport = read(&ev_a.join("metric_report.json"));
    assert_eq!(metrics.n_windows, 4);
    for w in &metrics.per_window {
        for v in [w.bleu1, w.meteor, w.bertscore] {
            assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
        }
    }
    assert!(ev_a.join("run_manifest.json").exists());
}

#[test]
fn sweep_prompt_length_emits_three_rows_and_a_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("sweep");
    run_ok(&["prepare", "--config", cfg, "--out", data.to_str().unwrap()]);
    run_ok(&[
        "sweep",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--axis",
        "prompt-length",
        "--seeds",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows: Vec<serde_json::Value> = read(&out.join("sweep.json"));
    assert_eq!(rows.len(), 3);
    let ks: Vec<u64> = rows
        .iter()
        .map(|r| r["prompt_len"].as_u64().unwrap())
        .collect();
    assert_eq!(ks, vec![2, 5, 10]);
    let svg = std::fs::read_to_string(out.join("sweep_meteor.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(out.join("sweep.csv").exists());
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn sweep_strategy_grid_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("sweep");
    run_ok(&["prepare", "--config", cfg, "--out", data.to_str().unwrap()]);
    run_ok(&[
        "sweep",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--axis",
        "strategy-grid",
        "--seeds",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows: Vec<serde_json::Value> = read(&out.join("sweep.json"));
    assert_eq!(rows.len(), 4);
    let settings: Vec<&str> = rows
        .iter()
        .map(|r| r["setting"].as_str().unwrap())
        .collect();
    assert_eq!(
        settings,
        vec![
            "word_rate_frozen",
            "word_rate_fine_tune",
            "special_token_frozen",
            "special_token_fine_tune"
        ]
    );
    assert!(out.join("sweep_meteor.svg").exists());
}

#[test]
fn eval_scores_identity_report_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<WindowDecodeRecord> = (0..3)
        .map(|i| WindowDecodeRecord {
            window_idx: i,
            story_id: "story00".into(),
            strategy: StopStrategy::SpecialToken,
            stop_reason: StopReason::DollarCount,
            predicted_words: 5,
            actual_words: 5,
            generated: "the quick brown fox jumps".into(),
            reference: "the quick brown fox jumps".into(),
        })
        .collect();
    let report = InferReport {
        mode: "brain_to_text".into(),
        strategy: StopStrategy::SpecialToken,
        rows,
    };
    let path = dir.path().join("report.json");
    std::fs::write(&path, serde_json::to_string(&report).unwrap()).unwrap();
    let out = dir.path().join("out");
    let stdout = run_ok(&[
        "eval",
        "--report",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = String::from_utf8_lossy(&stdout.stdout).into_owned();
    let metrics: MetricReport = read(&out.join("metric_report.json"));
    assert_eq!(metrics.bleu1, 1.0);
    assert!(metrics.meteor >= 0.99);
    assert!((metrics.bertscore - 1.0).abs() < 1e-6);
    assert!(text.contains("BLEU-1 1.0000"), "stdout: {text}");
}
