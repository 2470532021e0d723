//! Two-stage training orchestration.
//!
//! Stage 1 fits the text-to-text baseline: frozen text encoder, trainable
//! prompt mapper, and (optionally) the LM, under the prompted
//! reconstruction loss. Stage 2 freezes that mapper, adds a brain-side
//! prompt mapper over fMRI frames, and fits it under the brain
//! reconstruction loss plus the contrastive alignment against the frozen
//! stage-1 text prompts.
//!
//! Everything is seeded: identical config + seed gives bit-identical
//! checkpoints, step logs, and metrics.

use std::io::Write as _;
use std::path::Path;

use crate::ckpt::{load_checkpoint, save_checkpoint, ParamSet};
use crate::corpus::{annotate_special_tokens, Window, WordEvent};
use crate::infer::StopStrategy;
use crate::lm::{LmConfig, ToyLm, Vocab};
use crate::objectives::{
    text_total_loss, total_loss, Batch, ContrastiveForm, LossReport, PromptPooling,
    DEFAULT_ALPHA, DEFAULT_TAU,
};
use crate::prompting::{brain_prompt, text_prompt, MapperConfig, PromptMapper, TextEncoder};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{cos_flat, Mat};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Decoder,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Baseline => "baseline",
            Stage::Decoder => "decoder",
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub fine_tune_lm: bool,
    /// Decides target texts: `special_token` trains on annotated strings
    /// ("= ... $"), `word_rate` on the bare words.
    pub inference_strategy: StopStrategy,
    pub alpha: f64,
    pub tau: f64,
    pub contrastive_form: ContrastiveForm,
    pub pooling: PromptPooling,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of windows held out for early stopping (0 disables).
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Text-encoder embedding width.
    pub d_enc: usize,
    /// Prompt length k.
    pub prompt_len: usize,
    pub mapper_width: usize,
    pub mapper_layers: usize,
    pub mapper_heads: usize,
    /// Longest input row sequence a mapper accepts (words for the text
    /// arm, TRs for the brain arm).
    pub mapper_max_in: usize,
    pub lm: LmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Baseline,
            fine_tune_lm: false,
            inference_strategy: StopStrategy::SpecialToken,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            contrastive_form: ContrastiveForm::default(),
            pooling: PromptPooling::default(),
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 40,
            seed: 0,
            val_fraction: 0.1,
            patience: 8,
            d_enc: 32,
            prompt_len: 5,
            mapper_width: 64,
            mapper_layers: 2,
            mapper_heads: 4,
            mapper_max_in: 96,
            lm: LmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be a nonnegative number, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.prompt_len == 0 {
            return Err(Error::Config(
                "batch_size, epochs and prompt_len must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive, weight_decay nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.lm.validate()?;
        Ok(())
    }

    fn mapper_config(&self, d_in: usize) -> MapperConfig {
        MapperConfig {
            d_in,
            width: self.mapper_width,
            n_layers: self.mapper_layers,
            n_heads: self.mapper_heads,
            k: self.prompt_len,
            d_out: self.lm.d_model,
            max_in: self.mapper_max_in,
        }
    }
}

/// Per-epoch summary; `train_loss` is the token-weighted mean of the
/// step totals.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// A trained model: every parameter (both stages share one namespace),
/// the vocabulary, and enough configuration to rebuild the forward pass.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParamSet,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub encoder: TextEncoder,
    pub tmap_cfg: MapperConfig,
    /// Present after stage 2 (its `d_in` is the voxel count).
    pub enc_cfg: Option<MapperConfig>,
    pub history: Vec<EpochStats>,
    /// One record per optimizer step, in order. Not persisted in the
    /// checkpoint; the training CLI streams it to a JSONL file.
    pub step_log: Vec<LossReport>,
    /// Stream position of the training RNG when the run finished.
    pub rng_word_pos: u128,
}

impl TrainedModel {
    pub fn lm(&self) -> Result<ToyLm> {
        ToyLm::attach(&self.params, "lm", self.config.lm)
    }

    pub fn text_mapper(&self) -> PromptMapper {
        PromptMapper {
            prefix: "tmap".into(),
            cfg: self.tmap_cfg,
        }
    }

    pub fn brain_mapper(&self) -> Result<PromptMapper> {
        let cfg = self.enc_cfg.ok_or_else(|| {
            Error::Validation("model has no brain mapper (stage-1 checkpoint)".into())
        })?;
        Ok(PromptMapper {
            prefix: "enc".into(),
            cfg,
        })
    }
}

// ---------------------------------------------------------------------
// optimizer

/// Decoupled-weight-decay adaptive optimizer. Moment buffers exist only
/// for trainable parameters; frozen ones are never touched.
struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: usize,
}

impl AdamW {
    fn new(params: &ParamSet, weight_decay: f64) -> AdamW {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            if params.is_trainable(i) {
                let val = params.value(i);
                m.push(Some(Mat::zeros(val.rows, val.cols)));
                v.push(Some(Mat::zeros(val.rows, val.cols)));
            } else {
                m.push(None);
                v.push(None);
            }
        }
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    /// One update over the trainable parameters. `grads` is the tape's
    /// backward output; `vars` maps parameter index to tape variable. A
    /// missing gradient counts as zero (the parameter never entered the
    /// step's graph).
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<Mat>], vars: &[Var], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let grad = grads[vars[i].0].as_ref();
            let p = params.value_mut(i);
            for j in 0..p.data.len() {
                let g = grad.map_or(0.0, |g| g.data[j]);
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// Linear warmup to `lr` over the first 5% of steps, flat afterwards.
fn lr_at(step: usize, total_steps: usize, lr: f64) -> f64 {
    let warmup = ((total_steps as f64 * 0.05).ceil() as usize).max(1);
    lr * (((step + 1) as f64 / warmup as f64).min(1.0))
}

// ---------------------------------------------------------------------
// data plumbing

/// Encode each window's target per the inference strategy.
fn targets_for(windows: &[&Window], vocab: &Vocab, strategy: StopStrategy) -> Vec<Vec<usize>> {
    windows
        .iter()
        .map(|w| match strategy {
            StopStrategy::SpecialToken => vocab.encode_text(&annotate_special_tokens(w)),
            StopStrategy::WordRate => {
                let words = w.words();
                vocab.encode(words.iter().map(|s| s.as_str()))
            }
        })
        .collect()
}

fn usable<'w>(windows: &'w [Window]) -> Result<Vec<&'w Window>> {
    let kept: Vec<&Window> = windows.iter().filter(|w| !w.events.is_empty()).collect();
    if kept.is_empty() {
        return Err(Error::Validation(
            "corpus has no windows with any words".into(),
        ));
    }
    Ok(kept)
}

fn check_lengths(cfg: &TrainConfig, windows: &[&Window], targets: &[Vec<usize>]) -> Result<()> {
    let max_words = windows.iter().map(|w| w.events.len()).max().unwrap_or(0);
    let max_tr = windows.iter().map(|w| w.n_tr()).max().unwrap_or(0);
    if max_words > cfg.mapper_max_in || max_tr > cfg.mapper_max_in {
        return Err(Error::Config(format!(
            "mapper_max_in = {} is below the longest window ({} words, {} TRs)",
            cfg.mapper_max_in, max_words, max_tr
        )));
    }
    let max_target = targets.iter().map(Vec::len).max().unwrap_or(0);
    if cfg.prompt_len + max_target > cfg.lm.max_seq {
        return Err(Error::Config(format!(
            "lm.max_seq = {} cannot hold prompt_len {} + target length {}",
            cfg.lm.max_seq, cfg.prompt_len, max_target
        )));
    }
    Ok(())
}

/// Deterministic train/validation split of `0..n`.
fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = (val_fraction * n as f64).floor() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Wrap bare sentences as text-only windows (zeroed single-voxel frames,
/// `cap` words per TR) so text-stage training and tests can run without
/// any fMRI data.
pub fn text_only_windows(sentences: &[&str], cap: usize, tr_seconds: f64) -> Result<Vec<Window>> {
    if cap == 0 || !(tr_seconds > 0.0) {
        return Err(Error::Config(
            "need a positive words-per-TR cap and TR length".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let words: Vec<&str> = s.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let n_tr = words.len().div_ceil(cap);
        let dt = tr_seconds / cap as f64;
        let events: Vec<WordEvent> = words
            .iter()
            .enumerate()
            .map(|(j, w)| WordEvent {
                word: w.to_string(),
                onset: j as f64 * dt,
                offset: j as f64 * dt + dt * 0.8,
            })
            .collect();
        let mut words_per_tr = vec![cap; n_tr];
        *words_per_tr.last_mut().expect("n_tr >= 1") = words.len() - cap * (n_tr - 1);
        out.push(Window {
            story_id: format!("s{i:03}"),
            subject_id: "text".into(),
            start: 0.0,
            duration: n_tr as f64 * tr_seconds,
            tr_seconds,
            frames: Mat::zeros(n_tr, 1),
            events,
            words_per_tr,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation("no nonempty sentences".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// training loops

struct StepOutcome {
    report: LossReport,
    grads: Vec<Option<Mat>>,
    vars: Vec<Var>,
}

/// Snapshot/restore of all parameter values (for best-epoch rollback).
fn snapshot(params: &ParamSet) -> Vec<Mat> {
    (0..params.len()).map(|i| params.value(i).clone()).collect()
}

fn restore(params: &mut ParamSet, snap: &[Mat]) {
    for (i, m) in snap.iter().enumerate() {
        *params.value_mut(i) = m.clone();
    }
}

/// Train the text-to-text baseline. The text encoder is frozen by
/// construction; the LM is updated only when `fine_tune_lm` is set.
pub fn train_baseline(
    cfg: &TrainConfig,
    windows: &[Window],
    log_path: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.stage != Stage::Baseline {
        return Err(Error::Config(format!(
            "train_baseline needs stage = baseline, got {}",
            cfg.stage
        )));
    }
    let windows = usable(windows)?;
    let all_words: Vec<String> = windows.iter().flat_map(|w| w.words()).collect();
    let vocab = Vocab::build(all_words.iter().map(|s| s.as_str()));
    let targets = targets_for(&windows, &vocab, cfg.inference_strategy);
    check_lengths(cfg, &windows, &targets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let lm = ToyLm::init(&mut params, "lm", cfg.lm, vocab.len(), &mut rng)?;
    let tmap_cfg = cfg.mapper_config(cfg.d_enc);
    let tmap = PromptMapper::init(&mut params, "tmap", tmap_cfg, &mut rng)?;
    let encoder = TextEncoder::new(cfg.d_enc, cfg.seed);
    params.set_trainable_prefix("lm", cfg.fine_tune_lm);

    let (train_idx, val_idx) = split_indices(windows.len(), cfg.val_fraction, &mut rng);
    if train_idx.is_empty() {
        return Err(Error::Config("validation split leaves no training windows".into()));
    }

    let word_lists: Vec<Vec<String>> = windows.iter().map(|w| w.words()).collect();
    let forward = |tape: &mut Tape,
                   params: &ParamSet,
                   batch_idx: &[usize]|
     -> Result<StepOutcome> {
        let b = params.bind(tape);
        let vars = b.vars.clone();
        let mut prompts = Vec::with_capacity(batch_idx.len());
        let mut tg = Vec::with_capacity(batch_idx.len());
        for &i in batch_idx {
            prompts.push(text_prompt(tape, &b, &tmap, &encoder, &word_lists[i])?);
            tg.push(targets[i].clone());
        }
        let (loss, report) = text_total_loss(tape, &b, &lm, &prompts, &tg, cfg.alpha, cfg.tau)?;
        let grads = tape.backward(loss);
        Ok(StepOutcome {
            report,
            grads,
            vars,
        })
    };

    let outcome = run_epochs(cfg, &mut params, &mut rng, &train_idx, &val_idx, log_path, forward)?;
    Ok(TrainedModel {
        params,
        vocab,
        config: cfg.clone(),
        encoder,
        tmap_cfg,
        enc_cfg: None,
        history: outcome.0,
        step_log: outcome.1,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// Train the fMRI decoder against a compatible stage-1 baseline. The
/// stage-1 mapper is frozen (its prompts are the stationary contrastive
/// targets); the brain mapper is always updated; the LM follows
/// `fine_tune_lm`.
pub fn train_decoder(
    cfg: &TrainConfig,
    windows: &[Window],
    baseline: &TrainedModel,
    log_path: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.stage != Stage::Decoder {
        return Err(Error::Config(format!(
            "train_decoder needs stage = decoder, got {}",
            cfg.stage
        )));
    }
    let mut diffs = Vec::new();
    let b_cfg = &baseline.config;
    if baseline.enc_cfg.is_some() {
        diffs.push("checkpoint is not a stage-1 baseline".to_string());
    }
    if cfg.prompt_len != b_cfg.prompt_len {
        diffs.push(format!(
            "prompt_len {} vs baseline {}",
            cfg.prompt_len, b_cfg.prompt_len
        ));
    }
    if cfg.lm != b_cfg.lm {
        diffs.push(format!("lm {:?} vs baseline {:?}", cfg.lm, b_cfg.lm));
    }
    if cfg.inference_strategy != b_cfg.inference_strategy {
        diffs.push(format!(
            "inference_strategy {} vs baseline {} (each strategy pairs with its own baseline)",
            cfg.inference_strategy, b_cfg.inference_strategy
        ));
    }
    if !diffs.is_empty() {
        return Err(Error::Config(format!(
            "incompatible baseline checkpoint: {}",
            diffs.join("; ")
        )));
    }

    let windows = usable(windows)?;
    let n_voxels = windows[0].frames.cols;
    for w in &windows {
        if w.frames.cols != n_voxels {
            return Err(Error::Shape {
                expected: format!("{n_voxels} voxels"),
                got: format!("{} in window of {}", w.frames.cols, w.story_id),
            });
        }
    }
    let vocab = baseline.vocab.clone();
    let targets = targets_for(&windows, &vocab, cfg.inference_strategy);
    check_lengths(cfg, &windows, &targets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = baseline.params.clone();
    let lm = ToyLm::attach(&params, "lm", cfg.lm)?;
    let tmap = baseline.text_mapper();
    let encoder = baseline.encoder;
    let enc_cfg = cfg.mapper_config(n_voxels);
    let emap = PromptMapper::init(&mut params, "enc", enc_cfg, &mut rng)?;
    params.set_trainable_prefix("lm", cfg.fine_tune_lm);
    params.set_trainable_prefix("tmap", false);

    let (train_idx, val_idx) = split_indices(windows.len(), cfg.val_fraction, &mut rng);
    if train_idx.is_empty() {
        return Err(Error::Config("validation split leaves no training windows".into()));
    }

    let word_lists: Vec<Vec<String>> = windows.iter().map(|w| w.words()).collect();
    let forward = |tape: &mut Tape,
                   params: &ParamSet,
                   batch_idx: &[usize]|
     -> Result<StepOutcome> {
        let b = params.bind(tape);
        let vars = b.vars.clone();
        let mut prompts_b = Vec::with_capacity(batch_idx.len());
        let mut tg = Vec::with_capacity(batch_idx.len());
        for &i in batch_idx {
            prompts_b.push(brain_prompt(tape, &b, &emap, windows[i])?);
            tg.push(targets[i].clone());
        }
        // text prompts only exist when the contrastive term will use them
        let prompts_t = if cfg.alpha != 0.0 && batch_idx.len() >= 2 {
            let mut pt = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                pt.push(text_prompt(tape, &b, &tmap, &encoder, &word_lists[i])?);
            }
            Some(pt)
        } else {
            None
        };
        let batch = Batch {
            prompts_b,
            prompts_t,
            targets: tg,
        };
        let (loss, report) = total_loss(
            tape,
            &b,
            &lm,
            &batch,
            cfg.alpha,
            cfg.tau,
            cfg.contrastive_form,
            cfg.pooling,
        )?;
        let grads = tape.backward(loss);
        Ok(StepOutcome {
            report,
            grads,
            vars,
        })
    };

    let outcome = run_epochs(cfg, &mut params, &mut rng, &train_idx, &val_idx, log_path, forward)?;
    Ok(TrainedModel {
        params,
        vocab,
        config: cfg.clone(),
        encoder,
        tmap_cfg: baseline.tmap_cfg,
        enc_cfg: Some(enc_cfg),
        history: outcome.0,
        step_log: outcome.1,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// Shared epoch loop: shuffled minibatches, warmed-up AdamW, per-step
/// logging, early stopping on the validation loss with best-epoch
/// rollback.
fn run_epochs(
    cfg: &TrainConfig,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    train_idx: &[usize],
    val_idx: &[usize],
    log_path: Option<&Path>,
    mut forward: impl FnMut(&mut Tape, &ParamSet, &[usize]) -> Result<StepOutcome>,
) -> Result<(Vec<EpochStats>, Vec<LossReport>)> {
    let mut log_file = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };
    let mut opt = AdamW::new(params, cfg.weight_decay);
    let n_batches = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let mut step = 0usize;
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut history = Vec::new();
    let mut step_log = Vec::new();
    let mut best: Option<(f64, Vec<Mat>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut tok_sum, mut loss_sum) = (0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let out = forward(&mut tape, params, chunk)?;
            opt.step(params, &out.grads, &out.vars, lr_at(step, total_steps, cfg.lr));
            step += 1;
            tok_sum += out.report.n_tokens;
            loss_sum += out.report.l_total * out.report.n_tokens as f64;
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &out.report)?;
                f.write_all(b"\n")?;
            }
            step_log.push(out.report);
        }
        let train_loss = loss_sum / tok_sum as f64;

        let val_loss = if val_idx.is_empty() {
            None
        } else {
            // forward-only pass; the gradients are computed and dropped,
            // which is affordable at this scale
            let (mut vt, mut vl) = (0usize, 0.0);
            for chunk in val_idx.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let out = forward(&mut tape, params, chunk)?;
                let l = out.report.l_brain.or(out.report.l_text).unwrap_or(out.report.l_total);
                vt += out.report.n_tokens;
                vl += l * out.report.n_tokens as f64;
            }
            Some(vl / vt as f64)
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if let Some(v) = val_loss {
            let improved = best.as_ref().map_or(true, |(b, _)| v < *b);
            if improved {
                best = Some((v, snapshot(params)));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        restore(params, &snap);
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    Ok((history, step_log))
}

// ---------------------------------------------------------------------
// checkpoint round trip

pub fn save_trained(dir: &Path, model: &TrainedModel) -> Result<()> {
    let meta = serde_json::json!({
        "config": model.config,
        "vocab": model.vocab,
        "encoder": model.encoder,
        "tmap_cfg": model.tmap_cfg,
        "enc_cfg": model.enc_cfg,
        "history": model.history,
        "lm_checksum": model.params.checksum_prefix("lm").to_string(),
        "rng_word_pos": model.rng_word_pos.to_string(),
    });
    save_checkpoint(dir, &model.params, &meta)
}

pub fn load_trained(dir: &Path) -> Result<TrainedModel> {
    let (params, meta) = load_checkpoint(dir)?;
    let field = |name: &str| -> Result<serde_json::Value> {
        meta.get(name)
            .cloned()
            .ok_or_else(|| Error::Data(format!("checkpoint meta lacks {name:?}")))
    };
    let config: TrainConfig = serde_json::from_value(field("config")?)?;
    let vocab: Vocab = serde_json::from_value(field("vocab")?)?;
    let encoder: TextEncoder = serde_json::from_value(field("encoder")?)?;
    let tmap_cfg: MapperConfig = serde_json::from_value(field("tmap_cfg")?)?;
    let enc_cfg: Option<MapperConfig> = serde_json::from_value(field("enc_cfg")?)?;
    let history: Vec<EpochStats> = serde_json::from_value(field("history")?)?;
    let rng_word_pos = field("rng_word_pos")?
        .as_str()
        .and_then(|s| s.parse::<u128>().ok())
        .unwrap_or(0);
    // restore the trainable flags the stage implies
    let mut params = params;
    params.set_trainable_prefix("lm", config.fine_tune_lm);
    if enc_cfg.is_some() {
        params.set_trainable_prefix("tmap", false);
    }
    Ok(TrainedModel {
        params,
        vocab,
        config,
        encoder,
        tmap_cfg,
        enc_cfg,
        history,
        step_log: Vec::new(),
        rng_word_pos,
    })
}

/// Mean cosine between each window's flattened brain prompt and its
/// frozen text prompt — the alignment the contrastive term maximizes.
pub fn mean_prompt_alignment(model: &TrainedModel, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Validation("no windows to score".into()));
    }
    let tmap = model.text_mapper();
    let emap = model.brain_mapper()?;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let mut sum = 0.0;
    for w in windows {
        let pb = brain_prompt(&mut tape, &b, &emap, w)?;
        let words = w.words();
        let pt = text_prompt(&mut tape, &b, &tmap, &model.encoder, &words)?;
        sum += cos_flat(tape.value(pb), tape.value(pt));
    }
    Ok(sum / windows.len() as f64)
}
