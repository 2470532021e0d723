//! Command-line pipeline: `prepare` synthesizes a paired corpus,
//! `train` fits the two stages, `infer` decodes windows, `eval` scores an
//! inference report, and `sweep` runs the ablation grids end to end.
//!
//! Every command writes a `run_manifest.json` into its output directory.
//! Configuration precedence is CLI flag > config file (TOML) > default.
//! Exit codes: 0 ok, 2 configuration error, 3 data error.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    annotate_special_tokens, load_fmri_run, load_transcript, save_fmri_run, save_transcript,
    window_run_with_offset, FmriRun, StimulusTranscript, Window,
};
use crate::eval::{evaluate_story, tokenize, HashEmbedder, MetricReport};
use crate::infer::{
    fit_word_rate_model, generate_special_token, generate_word_rate, predict_word_count,
    StopStrategy, WindowDecodeRecord, WordRateModel,
};
use crate::prompting::{brain_prompt, text_prompt};
use crate::synth::{make_synthetic_dataset, SynthConfig};
use crate::tensor::tape::Tape;
use crate::tensor::Mat;
use crate::train::{
    load_trained, save_trained, train_baseline, train_decoder, Stage, TrainConfig, TrainedModel,
};
use crate::util::{fnv1a64, read_json, write_json};
use crate::{Error, Result};

// ---------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Backend {
    Toy,
    Pretrained,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WindowingConfig {
    pub window_seconds: f64,
    /// Read frames this many TRs after the words they pair with
    /// (compensates the hemodynamic lag; 0 reads them in place).
    pub frame_offset_trs: usize,
    /// Number of trailing windows tagged as the held-out split.
    pub holdout_windows: usize,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        WindowingConfig {
            window_seconds: 20.0,
            frame_offset_trs: 0,
            holdout_windows: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Ridge strength for the word-rate regression.
    pub ridge_reg: f64,
    /// Generation cap: this many times the window's nominal token budget.
    pub max_new_factor: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            ridge_reg: 1e-2,
            max_new_factor: 4,
        }
    }
}

/// One config file drives the whole pipeline; each section has complete
/// defaults, so an empty file (or none at all) is valid.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub windowing: WindowingConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

// ---------------------------------------------------------------------
// argument surface

#[derive(Debug, Parser)]
#[command(
    name = "braintext",
    version,
    about = "Decode stimulus text from fMRI windows via prompt vectors over a decoder LM"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic paired corpus and window it for training.
    Prepare(PrepareArgs),
    /// Train the text-to-text baseline or the fMRI decoder.
    Train(TrainArgs),
    /// Decode windows with a trained checkpoint into an inference report.
    Infer(InferArgs),
    /// Score an inference report (no model needed).
    Eval(EvalArgs),
    /// Run an ablation grid end to end and plot it.
    Sweep(SweepArgs),
}

/// Flags shared by every command. Each one overrides the matching config
/// file key; absent flags leave the file (or default) value in place.
#[derive(Debug, Clone, Args)]
pub struct CommonOpts {
    /// TOML pipeline config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inference stop strategy (decides training targets too).
    #[arg(long)]
    pub strategy: Option<StopStrategy>,
    /// Fine-tune the LM instead of keeping it frozen.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fine_tune_lm: Option<bool>,
    /// Contrastive weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Prompt length k.
    #[arg(long)]
    pub prompt_length: Option<usize>,
    /// LM backend. Only the self-contained toy backend ships here.
    #[arg(long, value_enum, default_value_t = Backend::Toy)]
    pub backend: Backend,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl CommonOpts {
    /// Effective config after precedence: flags > file > defaults.
    pub fn effective_config(&self) -> Result<PipelineConfig> {
        if self.backend == Backend::Pretrained {
            return Err(Error::Config(
                "backend 'pretrained' is not available in this build; use 'toy'".into(),
            ));
        }
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.train.inference_strategy = s;
        }
        if let Some(f) = self.fine_tune_lm {
            cfg.train.fine_tune_lm = f;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(t) = self.tau {
            cfg.train.tau = t;
        }
        if let Some(k) = self.prompt_length {
            cfg.train.prompt_len = k;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: CommonOpts,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Prepared data directory (from `prepare`).
    #[arg(long)]
    pub data: PathBuf,
    /// Which stage to train.
    #[arg(long, value_enum, default_value_t = Stage::Baseline)]
    pub stage: Stage,
    /// Stage-1 checkpoint directory (required for --stage decoder).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Holdout,
    All,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Checkpoint directory (stage-1 decodes text-to-text; stage-2
    /// decodes brain-to-text).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Prepared data directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Which windows to decode.
    #[arg(long, value_enum, default_value_t = SplitChoice::Holdout)]
    pub split: SplitChoice,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Inference report to score (carries its own references).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    /// Prompt length k over {2, 5, 10}.
    PromptLength,
    /// {word_rate, special_token} x {frozen, fine-tune}.
    StrategyGrid,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Prepared data directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SweepAxis::PromptLength)]
    pub axis: SweepAxis,
    /// Seeds per setting (seed, seed+1, ...), averaged in the table.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prepare(a) => cmd_prepare(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Infer(a) => cmd_infer(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Sweep(a) => cmd_sweep(&a),
    }
}

// ---------------------------------------------------------------------
// run manifests

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

fn config_hash(cfg: &PipelineConfig, extra: &[&str]) -> Result<String> {
    let mut text = serde_json::to_string(cfg)?;
    for e in extra {
        text.push('\u{1f}');
        text.push_str(e);
    }
    Ok(format!("{:016x}", fnv1a64(text.as_bytes())))
}

fn write_run_manifest(
    dir: &Path,
    command: String,
    cfg: &PipelineConfig,
    extra: &[&str],
    inputs: Vec<String>,
    mut outputs: Vec<String>,
    started: SystemTime,
    timer: Instant,
) -> Result<()> {
    outputs.sort();
    let manifest = RunManifest {
        command,
        config_hash: config_hash(cfg, extra)?,
        inputs,
        outputs,
        seed: cfg.train.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_secs: started
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        wall_clock_secs: timer.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("run_manifest.json"), &manifest)
}

// ---------------------------------------------------------------------
// prepare

/// One window's manifest row: everything but the frames, with targets
/// for both strategies.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WindowRow {
    pub index: usize,
    pub story_id: String,
    pub subject_id: String,
    pub start: f64,
    pub n_tr: usize,
    pub split: String,
    pub words: Vec<String>,
    pub word_rate_target: String,
    pub special_token_target: String,
}

const DATA_CONFIG: &str = "config.json";
const WINDOWS_FILE: &str = "windows.json";

/// Window every run, in story order, dropping wordless windows (they
/// have no target to train on or reference to score against).
fn windows_of(
    transcripts: &[StimulusTranscript],
    runs: &[FmriRun],
    w: &WindowingConfig,
) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for (t, r) in transcripts.iter().zip(runs) {
        let ws = window_run_with_offset(r, t, w.window_seconds, w.frame_offset_trs)?;
        out.extend(ws.into_iter().filter(|w| !w.events.is_empty()));
    }
    Ok(out)
}

fn split_of(index: usize, total: usize, holdout: usize) -> &'static str {
    if index + holdout >= total {
        "holdout"
    } else {
        "train"
    }
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let started = SystemTime::now();
    let timer = Instant::now();
    let cfg = args.common.effective_config()?;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;

    let (transcripts, runs) = make_synthetic_dataset(&cfg.synth)?;
    let mut outputs = vec![DATA_CONFIG.to_string(), WINDOWS_FILE.to_string()];
    for (t, r) in transcripts.iter().zip(&runs) {
        let tsv = format!("{}.tsv", t.story_id);
        save_transcript(&out.join(&tsv), t)?;
        save_fmri_run(out, r)?;
        outputs.push(tsv);
        outputs.push(format!("{}_{}.bold.bin", r.story_id, r.subject_id));
        outputs.push(format!("{}_{}.bold.json", r.story_id, r.subject_id));
    }

    let windows = windows_of(&transcripts, &runs, &cfg.windowing)?;
    let rows: Vec<WindowRow> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| WindowRow {
            index: i,
            story_id: w.story_id.clone(),
            subject_id: w.subject_id.clone(),
            start: w.start,
            n_tr: w.n_tr(),
            split: split_of(i, windows.len(), cfg.windowing.holdout_windows).to_string(),
            words: w.words(),
            word_rate_target: w.words().join(" "),
            special_token_target: annotate_special_tokens(w),
        })
        .collect();
    write_json(&out.join(WINDOWS_FILE), &rows)?;
    write_json(&out.join(DATA_CONFIG), &cfg)?;
    write_run_manifest(
        out,
        "prepare".into(),
        &cfg,
        &[],
        vec![],
        outputs,
        started,
        timer,
    )?;
    let holdout = rows.iter().filter(|r| r.split == "holdout").count();
    println!(
        "prepared {} windows ({} holdout) from {} stories -> {}",
        rows.len(),
        holdout,
        transcripts.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// loading a prepared directory

pub struct Prepared {
    pub cfg: PipelineConfig,
    pub windows: Vec<Window>,
    pub rows: Vec<WindowRow>,
}

impl Prepared {
    pub fn select(&self, split: SplitChoice) -> Vec<Window> {
        self.windows
            .iter()
            .zip(&self.rows)
            .filter(|(_, r)| match split {
                SplitChoice::Train => r.split == "train",
                SplitChoice::Holdout => r.split == "holdout",
                SplitChoice::All => true,
            })
            .map(|(w, _)| w.clone())
            .collect()
    }
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let cfg: PipelineConfig = read_json(&dir.join(DATA_CONFIG)).map_err(|e| {
        Error::Data(format!(
            "{} is not a prepared data directory: {e}",
            dir.display()
        ))
    })?;
    let rows: Vec<WindowRow> = read_json(&dir.join(WINDOWS_FILE))?;

    let mut story_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    story_files.sort();
    let mut transcripts = Vec::new();
    let mut runs = Vec::new();
    for tsv in &story_files {
        let t = load_transcript(tsv, true)?;
        let sidecar = dir.join(format!("{}_synth01.bold.json", t.story_id));
        runs.push(load_fmri_run(&sidecar)?);
        transcripts.push(t);
    }
    let windows = windows_of(&transcripts, &runs, &cfg.windowing)?;
    if windows.len() != rows.len() {
        return Err(Error::Data(format!(
            "prepared dir inconsistent: {} windows from containers vs {} manifest rows",
            windows.len(),
            rows.len()
        )));
    }
    Ok(Prepared { cfg, windows, rows })
}

// ---------------------------------------------------------------------
// train

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = SystemTime::now();
    let timer = Instant::now();
    let mut cfg = args.common.effective_config()?;
    cfg.train.stage = args.stage;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;

    let prepared = load_prepared(&args.data)?;
    let train_windows = prepared.select(SplitChoice::Train);
    let log_path = out.join("train_log.jsonl");

    let model = match args.stage {
        Stage::Baseline => {
            if args.baseline.is_some() {
                return Err(Error::Config(
                    "--baseline only applies to --stage decoder".into(),
                ));
            }
            train_baseline(&cfg.train, &train_windows, Some(&log_path))?
        }
        Stage::Decoder => {
            let bdir = args.baseline.as_ref().ok_or_else(|| {
                Error::Config("--stage decoder needs --baseline <stage-1 checkpoint>".into())
            })?;
            let baseline = load_trained(bdir)?;
            train_decoder(&cfg.train, &train_windows, &baseline, Some(&log_path))?
        }
    };
    save_trained(out, &model)?;
    write_json(&out.join(DATA_CONFIG), &cfg)?;

    let inputs = vec![args.data.display().to_string()]
        .into_iter()
        .chain(args.baseline.iter().map(|p| p.display().to_string()))
        .collect();
    write_run_manifest(
        out,
        format!("train --stage {}", args.stage),
        &cfg,
        &[&args.stage.to_string()],
        inputs,
        vec![
            "manifest.json".into(),
            "params.bin".into(),
            "train_log.jsonl".into(),
            DATA_CONFIG.into(),
        ],
        started,
        timer,
    )?;
    let last = model.history.last().expect("at least one epoch");
    match last.val_loss {
        Some(v) => println!(
            "trained {} for {} epochs: train loss {:.4}, val loss {:.4} -> {}",
            args.stage,
            model.history.len(),
            last.train_loss,
            v,
            out.display()
        ),
        None => println!(
            "trained {} for {} epochs: train loss {:.4} -> {}",
            args.stage,
            model.history.len(),
            last.train_loss,
            out.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------
// infer

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InferReport {
    /// "brain_to_text" for stage-2 checkpoints, "text_to_text" for
    /// stage-1 (the baseline reconstructs from the reference words).
    pub mode: String,
    pub strategy: StopStrategy,
    pub rows: Vec<WindowDecodeRecord>,
}

/// Decode one window set with a trained model. Word-rate budgets come
/// from `wr_model` when given (it is fit on training windows).
pub fn decode_windows(
    model: &TrainedModel,
    windows: &[Window],
    wr_model: Option<&WordRateModel>,
    infer_cfg: &InferConfig,
) -> Result<Vec<WindowDecodeRecord>> {
    let lm = model.lm()?;
    let strategy = model.config.inference_strategy;
    let brain = model.enc_cfg.is_some();
    let mut rows = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        // prompt for this window, as a plain value
        let prompt: Mat = {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let var = if brain {
                brain_prompt(&mut tape, &b, &model.brain_mapper()?, w)?
            } else {
                let words = w.words();
                text_prompt(&mut tape, &b, &model.text_mapper(), &model.encoder, &words)?
            };
            tape.value(var).clone()
        };
        // budget-based cap, shrunk to whatever fits the LM context after
        // the prompt block and the seeded start mark
        let context_room = model
            .config
            .lm
            .max_seq
            .saturating_sub(model.config.prompt_len + 1);
        if context_room == 0 {
            return Err(Error::Config(format!(
                "lm.max_seq {} leaves no room to generate after a length-{} prompt",
                model.config.lm.max_seq, model.config.prompt_len
            )));
        }
        let cap = (infer_cfg.max_new_factor * (3 * w.n_tr() + 1)).min(context_room);
        let (result, predicted_words) = match strategy {
            StopStrategy::SpecialToken => {
                let r = generate_special_token(
                    &model.params,
                    &lm,
                    &model.vocab,
                    &prompt,
                    w.n_tr(),
                    cap,
                )?;
                let n = tokenize(&r.surface_text).len();
                (r, n)
            }
            StopStrategy::WordRate => {
                let wr = wr_model.ok_or_else(|| {
                    Error::Validation("word-rate decoding needs a fitted word-rate model".into())
                })?;
                let budget = predict_word_count(wr, &w.frames)?;
                let r = generate_word_rate(&model.params, &lm, &model.vocab, &prompt, budget, cap)?;
                (r, budget)
            }
        };
        rows.push(WindowDecodeRecord {
            window_idx: i,
            story_id: w.story_id.clone(),
            strategy,
            stop_reason: result.stop_reason,
            predicted_words,
            actual_words: w.events.len(),
            generated: result.surface_text,
            reference: w.words().join(" "),
        });
    }
    Ok(rows)
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let started = SystemTime::now();
    let timer = Instant::now();
    let cfg = args.common.effective_config()?;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;

    let model = load_trained(&args.ckpt)?;
    let prepared = load_prepared(&args.data)?;
    let windows = prepared.select(args.split);
    if windows.is_empty() {
        return Err(Error::Data(
            "no windows in the requested split (set windowing.holdout_windows at prepare \
             time, or pass --split all)"
                .into(),
        ));
    }
    let wr_model = match model.config.inference_strategy {
        StopStrategy::WordRate => Some(fit_word_rate_model(
            &prepared.select(SplitChoice::Train),
            prepared.cfg.infer.ridge_reg,
        )?),
        StopStrategy::SpecialToken => None,
    };
    let rows = decode_windows(&model, &windows, wr_model.as_ref(), &prepared.cfg.infer)?;
    let report = InferReport {
        mode: if model.enc_cfg.is_some() {
            "brain_to_text".into()
        } else {
            "text_to_text".into()
        },
        strategy: model.config.inference_strategy,
        rows,
    };
    write_json(&out.join("infer_report.json"), &report)?;
    write_run_manifest(
        out,
        "infer".into(),
        &cfg,
        &[&format!("{:?}", args.split)],
        vec![
            args.ckpt.display().to_string(),
            args.data.display().to_string(),
        ],
        vec!["infer_report.json".into()],
        started,
        timer,
    )?;
    println!(
        "decoded {} windows ({}) -> {}",
        report.rows.len(),
        report.mode,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// eval

pub fn score_report(report: &InferReport) -> Result<MetricReport> {
    let candidates: Vec<Vec<String>> = report.rows.iter().map(|r| tokenize(&r.generated)).collect();
    let references: Vec<Vec<String>> = report.rows.iter().map(|r| tokenize(&r.reference)).collect();
    evaluate_story(&candidates, &references, &HashEmbedder::default())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = SystemTime::now();
    let timer = Instant::now();
    let cfg = args.common.effective_config()?;
    let out = &args.common.out;
    std::fs::create_dir_all(out)?;

    let report: InferReport = read_json(&args.report)?;
    let metrics = score_report(&report)?;
    write_json(&out.join("metric_report.json"), &metrics)?;
    write_run_manifest(
        out,
        "eval".into(),
        &cfg,
        &[],
        vec![args.report.display().to_string()],
        vec!["metric_report.json".into()],
        started,
        timer,
    )?;
    println!(
        "scored {} windows: BLEU-1 {:.4}  METEOR {:.4}  BERTScore {:.4} -> {}",
        metrics.n_windows,
        metrics.bleu1,
        metrics.meteor,
        metrics.bertscore,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub prompt_len: usize,
    pub strategy: StopStrategy,
    pub fine_tune_lm: bool,
    pub seeds: u64,
    pub bleu1: f64,
    pub meteor: f64,
    pub bertscore: f64,
}

/// Train both stages, decode the holdout, and score it, for one setting
/// and one seed. Returns the metric means.
fn run_setting(
    base_cfg: &PipelineConfig,
    prepared: &Prepared,
    seed: u64,
    out_dir: &Path,
    tag: &str,
) -> Result<MetricReport> {
    let mut cfg = base_cfg.clone();
    cfg.train.seed = seed;

    let train_windows = prepared.select(SplitChoice::Train);
    let holdout = prepared.select(SplitChoice::Holdout);
    if holdout.is_empty() {
        return Err(Error::Data(
            "sweep needs held-out windows; set windowing.holdout_windows at prepare time".into(),
        ));
    }

    let mut b_cfg = cfg.train.clone();
    b_cfg.stage = Stage::Baseline;
    let baseline = train_baseline(&b_cfg, &train_windows, None)?;
    let mut d_cfg = cfg.train.clone();
    d_cfg.stage = Stage::Decoder;
    let model = train_decoder(&d_cfg, &train_windows, &baseline, None)?;

    let wr_model = match cfg.train.inference_strategy {
        StopStrategy::WordRate => Some(fit_word_rate_model(
            &train_windows,
            prepared.cfg.infer.ridge_reg,
        )?),
        StopStrategy::SpecialToken => None,
    };
    let rows = decode_windows(&model, &holdout, wr_model.as_ref(), &prepared.cfg.infer)?;
    let report = InferReport {
        mode: "brain_to_text".into(),
        strategy: cfg.train.inference_strategy,
        rows,
    };
    let metrics = score_report(&report)?;
    write_json(&out_dir.join(format!("{tag}_seed{seed}.json")), &metrics)?;
    Ok(metrics)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let started = SystemTime::now();
    let timer = Instant::now();
    let cfg = args.common.effective_config()?;
    let out = &args.common.out;
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }

    let prepared = load_prepared(&args.data)?;
    // (setting name, config patch)
    let settings: Vec<(String, TrainConfig)> = match args.axis {
        SweepAxis::PromptLength => [2usize, 5, 10]
            .iter()
            .map(|&k| {
                let mut t = cfg.train.clone();
                t.prompt_len = k;
                (format!("k{k}"), t)
            })
            .collect(),
        SweepAxis::StrategyGrid => {
            let mut v = Vec::new();
            for strategy in [StopStrategy::WordRate, StopStrategy::SpecialToken] {
                for fine_tune in [false, true] {
                    let mut t = cfg.train.clone();
                    t.inference_strategy = strategy;
                    t.fine_tune_lm = fine_tune;
                    let name = format!(
                        "{}_{}",
                        strategy,
                        if fine_tune { "fine_tune" } else { "frozen" }
                    );
                    v.push((name, t));
                }
            }
            v
        }
    };

    let mut table = Vec::new();
    for (name, t_cfg) in &settings {
        let mut sums = [0.0f64; 3];
        for s in 0..args.seeds {
            let seed = cfg.train.seed + s;
            let mut setting_cfg = cfg.clone();
            setting_cfg.train = t_cfg.clone();
            let m = run_setting(&setting_cfg, &prepared, seed, &runs_dir, name)?;
            sums[0] += m.bleu1;
            sums[1] += m.meteor;
            sums[2] += m.bertscore;
        }
        let n = args.seeds as f64;
        let row = SweepRow {
            setting: name.clone(),
            prompt_len: t_cfg.prompt_len,
            strategy: t_cfg.inference_strategy,
            fine_tune_lm: t_cfg.fine_tune_lm,
            seeds: args.seeds,
            bleu1: sums[0] / n,
            meteor: sums[1] / n,
            bertscore: sums[2] / n,
        };
        println!(
            "{:>24}  BLEU-1 {:.4}  METEOR {:.4}  BERTScore {:.4}",
            row.setting, row.bleu1, row.meteor, row.bertscore
        );
        table.push(row);
    }

    write_json(&out.join("sweep.json"), &table)?;
    let mut csv = String::from("setting,prompt_len,strategy,fine_tune_lm,bleu1,meteor,bertscore\n");
    for r in &table {
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.setting, r.prompt_len, r.strategy, r.fine_tune_lm, r.bleu1, r.meteor, r.bertscore
        ));
    }
    std::fs::write(out.join("sweep.csv"), csv)?;

    let plot = out.join("sweep_meteor.svg");
    match args.axis {
        SweepAxis::PromptLength => {
            let pts: Vec<(f64, f64)> = table
                .iter()
                .map(|r| (r.prompt_len as f64, r.meteor))
                .collect();
            svg_line_chart(
                &plot,
                "METEOR vs prompt length",
                "prompt length k",
                "METEOR",
                &pts,
            )?;
        }
        SweepAxis::StrategyGrid => {
            let labels: Vec<String> = table.iter().map(|r| r.setting.clone()).collect();
            let values: Vec<f64> = table.iter().map(|r| r.meteor).collect();
            svg_bar_chart(&plot, "METEOR by strategy and LM regime", &labels, &values)?;
        }
    }
    write_run_manifest(
        out,
        format!("sweep --axis {:?}", args.axis),
        &cfg,
        &[&format!("{:?}", args.axis), &args.seeds.to_string()],
        vec![args.data.display().to_string()],
        vec!["sweep.json".into(), "sweep.csv".into(), "sweep_meteor.svg".into()],
        started,
        timer,
    )?;
    println!("{} rows -> {}", table.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------
// plots (self-contained SVG)

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn svg_header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n"
        ),
        w = CHART_W,
        h = CHART_H,
        cx = CHART_W / 2.0,
        title = title
    )
}

fn svg_axes(y_min: f64, y_max: f64) -> String {
    let x0 = MARGIN;
    let x1 = CHART_W - MARGIN;
    let y0 = CHART_H - MARGIN;
    let y1 = MARGIN;
    let mut s = format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let v = y_min + f * (y_max - y_min);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{v:.3}</text>\n",
            x0 - 6.0,
            y + 4.0
        ));
        s.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n"
        ));
    }
    s
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let vals: Vec<f64> = values.collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.15).max(0.01);
    ((lo - pad).min(0.0).max(-0.05), hi + pad)
}

pub fn svg_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Validation("nothing to plot".into()));
    }
    let (y_min, y_max) = y_range(points.iter().map(|p| p.1));
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let x_span = (x_max - x_min).max(1e-9);
    let sx = |x: f64| MARGIN + (x - x_min) / x_span * (CHART_W - 2.0 * MARGIN);
    let sy = |y: f64| (CHART_H - MARGIN) - (y - y_min) / (y_max - y_min) * (CHART_H - 2.0 * MARGIN);

    let mut svg = svg_header(title);
    svg.push_str(&svg_axes(y_min, y_max));
    let poly: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f6feb\" stroke-width=\"2\"/>\n",
        poly.join(" ")
    ));
    for &(x, y) in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#1f6feb\"/>\n",
            sx(x),
            sy(y)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{:.0}</text>\n",
            sx(x),
            CHART_H - MARGIN + 16.0,
            x
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n",
        CHART_W / 2.0,
        CHART_H - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        CHART_H / 2.0,
        CHART_H / 2.0
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

pub fn svg_bar_chart(path: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    if labels.len() != values.len() || labels.is_empty() {
        return Err(Error::Validation("labels and values must pair up".into()));
    }
    let (y_min, y_max) = y_range(values.iter().cloned().chain(std::iter::once(0.0)));
    let sy = |y: f64| (CHART_H - MARGIN) - (y - y_min) / (y_max - y_min) * (CHART_H - 2.0 * MARGIN);
    let slot = (CHART_W - 2.0 * MARGIN) / labels.len() as f64;
    let bar_w = slot * 0.6;

    let mut svg = svg_header(title);
    svg.push_str(&svg_axes(y_min, y_max));
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.5);
        let top = sy(v.max(0.0));
        let bottom = sy(v.min(0.0));
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#2da44e\"/>\n",
            x - bar_w / 2.0,
            top,
            bar_w,
            (bottom - top).max(1.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{label}</text>\n",
            x,
            CHART_H - MARGIN + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{v:.3}</text>\n",
            x,
            top - 6.0
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
