//! Decoding text from an fMRI prompt: greedy generation with the two stop
//! strategies, and the word-rate model that drives one of them.
//!
//! `special_token` relies on the LM having been trained on annotated
//! targets: generation starts from the start mark and halts after the
//! window's TR count of end-of-TR marks. `word_rate` instead stops once
//! the surface word count reaches a budget predicted from the window's
//! BOLD frames by a ridge regression. Both carry a hard length cap so
//! degenerate models terminate.

use crate::ckpt::ParamSet;
use crate::corpus::Window;
use crate::lm::{argmax, ToyLm, Vocab};
use crate::tensor::tape::Tape;
use crate::tensor::{solve_spd, Mat};
use crate::{Error, Result};

/// Which stop rule inference uses.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum StopStrategy {
    WordRate,
    SpecialToken,
}

impl std::fmt::Display for StopStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopStrategy::WordRate => write!(f, "word_rate"),
            StopStrategy::SpecialToken => write!(f, "special_token"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    WordBudget,
    DollarCount,
    LengthCap,
}

/// Per-TR linear predictor of word counts from voxel vectors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WordRateModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub reg: f64,
}

/// Ridge regression from per-TR voxel rows to per-TR word counts, with an
/// unpenalized intercept: center features and targets, solve
/// `(Xc'Xc + reg I) w = Xc' yc`, then recover the intercept from the
/// means. As `reg` grows the weights shrink to zero and the prediction
/// collapses to the mean word rate.
pub fn fit_word_rate_model(windows: &[Window], reg: f64) -> Result<WordRateModel> {
    if windows.len() < 2 {
        return Err(Error::Validation(
            "need at least 2 windows to fit a word-rate model".into(),
        ));
    }
    if reg < 0.0 || !reg.is_finite() {
        return Err(Error::Config(format!("reg must be finite and >= 0, got {reg}")));
    }
    let p = windows[0].frames.cols;
    for w in windows {
        if w.frames.cols != p {
            return Err(Error::Shape {
                expected: format!("{p} voxels"),
                got: format!("{}", w.frames.cols),
            });
        }
    }
    let n: usize = windows.iter().map(|w| w.n_tr()).sum();
    // feature and target means
    let mut xbar = vec![0.0; p];
    let mut ybar = 0.0;
    for w in windows {
        for t in 0..w.n_tr() {
            for (j, &v) in w.frames.row(t).iter().enumerate() {
                xbar[j] += v;
            }
            ybar += w.words_per_tr[t] as f64;
        }
    }
    for v in &mut xbar {
        *v /= n as f64;
    }
    ybar /= n as f64;
    // normal equations on centered data
    let mut a = Mat::zeros(p, p);
    let mut rhs = vec![0.0; p];
    let mut xc = vec![0.0; p];
    for w in windows {
        for t in 0..w.n_tr() {
            let row = w.frames.row(t);
            for j in 0..p {
                xc[j] = row[j] - xbar[j];
            }
            let yc = w.words_per_tr[t] as f64 - ybar;
            for i in 0..p {
                let xi = xc[i];
                if xi == 0.0 {
                    continue;
                }
                let arow = a.row_mut(i);
                for j in 0..p {
                    arow[j] += xi * xc[j];
                }
                rhs[i] += xi * yc;
            }
        }
    }
    for i in 0..p {
        *a.at_mut(i, i) += reg;
    }
    let weights = solve_spd(&a, &rhs)?;
    let intercept = ybar - xbar.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>();
    Ok(WordRateModel {
        weights,
        intercept,
        reg,
    })
}

impl WordRateModel {
    /// Raw (unclamped) per-TR prediction.
    pub fn predict_tr(&self, voxels: &[f64]) -> f64 {
        self.intercept
            + voxels
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }
}

/// Predicted word count for one window: per-TR predictions clamped to
/// >= 0, rounded, and summed.
pub fn predict_word_count(model: &WordRateModel, frames: &Mat) -> Result<usize> {
    if frames.cols != model.weights.len() {
        return Err(Error::Shape {
            expected: format!("{} voxels", model.weights.len()),
            got: format!("{}", frames.cols),
        });
    }
    let mut total = 0usize;
    for t in 0..frames.rows {
        let raw = model.predict_tr(frames.row(t));
        total += raw.max(0.0).round() as usize;
    }
    Ok(total)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenerationResult {
    /// Full generated token stream, including any seeded start mark.
    pub tokens: Vec<usize>,
    /// Generated words with all marks stripped, space-joined.
    pub surface_text: String,
    pub stop_reason: StopReason,
}

fn is_surface_word(vocab: &Vocab, id: usize) -> bool {
    id != vocab.pad_id() && id != vocab.start_id() && id != vocab.tr_id()
}

fn surface_text(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&id| is_surface_word(vocab, id))
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Greedy decoding until `stop` yields a reason or `cap` new tokens have
/// been emitted. Pure in (parameters, prompt): ties break to the lowest
/// token id, and nothing is sampled.
fn greedy_generate(
    params: &ParamSet,
    lm: &ToyLm,
    seed_ids: Vec<usize>,
    prompt: &Mat,
    cap: usize,
    mut stop: impl FnMut(&[usize]) -> Option<StopReason>,
) -> Result<GenerationResult> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let p = tape.constant(prompt.clone());
    let mut ids = seed_ids;
    let n_seed = ids.len();
    let result_reason;
    loop {
        if let Some(reason) = stop(&ids[n_seed..]) {
            result_reason = reason;
            break;
        }
        if ids.len() - n_seed >= cap {
            result_reason = StopReason::LengthCap;
            break;
        }
        let logits = lm.next_token_logits(&mut tape, &b, Some(p), &ids)?;
        ids.push(argmax(&logits));
    }
    Ok(GenerationResult {
        surface_text: String::new(),
        tokens: ids,
        stop_reason: result_reason,
    })
}

/// Generate until the surface word count reaches `word_budget` (or `cap`
/// tokens have been emitted). A zero budget returns immediately.
pub fn generate_word_rate(
    params: &ParamSet,
    lm: &ToyLm,
    vocab: &Vocab,
    prompt: &Mat,
    word_budget: usize,
    cap: usize,
) -> Result<GenerationResult> {
    let mut res = greedy_generate(params, lm, vec![], prompt, cap, |generated| {
        let words = generated
            .iter()
            .filter(|&&id| is_surface_word(vocab, id))
            .count();
        (words >= word_budget).then_some(StopReason::WordBudget)
    })?;
    res.surface_text = surface_text(vocab, &res.tokens);
    Ok(res)
}

/// Generate from the start mark until the `n_tr`-th end-of-TR mark (or
/// `cap` tokens). The seeded start mark is kept in `tokens`; the surface
/// text never contains marks.
pub fn generate_special_token(
    params: &ParamSet,
    lm: &ToyLm,
    vocab: &Vocab,
    prompt: &Mat,
    n_tr: usize,
    cap: usize,
) -> Result<GenerationResult> {
    if n_tr == 0 {
        return Err(Error::Validation("n_tr must be at least 1".into()));
    }
    let tr = vocab.tr_id();
    let seed = vec![vocab.start_id()];
    let mut res = greedy_generate(params, lm, seed, prompt, cap, |generated| {
        let dollars = generated.iter().filter(|&&id| id == tr).count();
        (dollars >= n_tr).then_some(StopReason::DollarCount)
    })?;
    res.surface_text = surface_text(vocab, &res.tokens);
    Ok(res)
}

/// One line of the inference report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WindowDecodeRecord {
    pub window_idx: usize,
    pub story_id: String,
    pub strategy: StopStrategy,
    pub stop_reason: StopReason,
    pub predicted_words: usize,
    pub actual_words: usize,
    pub generated: String,
    pub reference: String,
}
