//! Training objectives: prompted text reconstruction, brain decoding, the
//! prompt contrastive term, and their weighted combination.
//!
//! Reconstruction losses are token-mean cross entropies of target tokens
//! under the LM conditioned on a prompt block. The contrastive term pulls
//! each window's fMRI prompt toward its text prompt and pushes it away
//! from the rest of the batch. The combined training loss is
//! `brain + alpha * contrastive`.

use crate::ckpt::Bound;
use crate::lm::ToyLm;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{cos_flat, Mat};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Which ratio the contrastive loss takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `-log(S_p / S_n)`: the positive term is not added to the
    /// denominator, so the loss can be negative when `S_p > S_n`.
    #[default]
    Literal,
    /// `-log(S_p / (S_p + S_n))`: standard InfoNCE-style ratio, always
    /// nonnegative. Kept for ablations.
    InfoNce,
}

/// How a `[k x d]` prompt block becomes one vector for cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPooling {
    /// Row-major flatten to `[k*d]`; preserves per-position structure.
    #[default]
    Flatten,
    /// Mean over the k rows; compares position-averaged content.
    MeanPool,
}

/// One training batch: parallel fMRI prompts, target token sequences,
/// and (when contrastive alignment is on) text prompts. Index i pairs
/// `prompts_b[i]` with `prompts_t[i]` as the positive pair for target i.
/// `prompts_t` is `None` for runs that never need contrastive targets,
/// so those runs skip the text-mapper forward altogether.
pub struct Batch {
    pub prompts_b: Vec<Var>,
    pub prompts_t: Option<Vec<Var>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn validate(&self, tape: &Tape) -> Result<()> {
        let n = self.targets.len();
        if n == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        if self.prompts_b.len() != n {
            return Err(Error::Validation(format!(
                "batch lists must be parallel: {} brain prompts, {} targets",
                self.prompts_b.len(),
                n
            )));
        }
        if let Some(pt) = &self.prompts_t {
            if pt.len() != n {
                return Err(Error::Validation(format!(
                    "batch lists must be parallel: {} text prompts, {} targets",
                    pt.len(),
                    n
                )));
            }
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Validation(format!("target {i} is empty")));
            }
        }
        let shape = {
            let m = tape.value(self.prompts_b[0]);
            (m.rows, m.cols)
        };
        for &p in self
            .prompts_b
            .iter()
            .chain(self.prompts_t.iter().flatten())
        {
            let m = tape.value(p);
            if (m.rows, m.cols) != shape {
                return Err(Error::Shape {
                    expected: format!("prompt [{} x {}]", shape.0, shape.1),
                    got: format!("[{} x {}]", m.rows, m.cols),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Per-batch loss components. `l_total = l_brain + alpha * l_contrast`
/// when both are computed; uncomputed terms are `None` (e.g. the
/// contrastive term for a singleton batch, where no negatives exist).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_text: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_brain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_contrast: Option<f64>,
    pub l_total: f64,
    pub alpha: f64,
    pub tau: f64,
    pub n_tokens: usize,
}

/// Token-mean cross entropy of each target sequence under the LM
/// conditioned on its prompt. Shared by the text and brain arms: only the
/// prompt source differs.
fn prompted_reconstruction_loss(
    tape: &mut Tape,
    b: &Bound,
    lm: &ToyLm,
    prompts: &[Var],
    targets: &[Vec<usize>],
) -> Result<(Var, usize)> {
    if prompts.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} prompts vs {} targets",
            prompts.len(),
            targets.len()
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    let mut n_tokens = 0usize;
    for (&p, ids) in prompts.iter().zip(targets) {
        if ids.is_empty() {
            return Err(Error::Validation("empty target sequence".into()));
        }
        let (loss, n) = lm.sequence_loss(tape, b, Some(p), ids)?;
        n_tokens += n;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let sum = total.expect("nonempty batch");
    Ok((tape.scale(sum, 1.0 / n_tokens as f64), n_tokens))
}

/// Token-mean reconstruction loss with text-derived prompts.
pub fn text_reconstruction_loss(
    tape: &mut Tape,
    b: &Bound,
    lm: &ToyLm,
    prompts_t: &[Var],
    targets: &[Vec<usize>],
) -> Result<(Var, usize)> {
    prompted_reconstruction_loss(tape, b, lm, prompts_t, targets)
}

/// Token-mean reconstruction loss with fMRI-derived prompts. Identical
/// contract and code path to [`text_reconstruction_loss`].
pub fn brain_decoding_loss(
    tape: &mut Tape,
    b: &Bound,
    lm: &ToyLm,
    prompts_b: &[Var],
    targets: &[Vec<usize>],
) -> Result<(Var, usize)> {
    prompted_reconstruction_loss(tape, b, lm, prompts_b, targets)
}

fn pool_value(p: &Mat, pooling: PromptPooling) -> Mat {
    match pooling {
        PromptPooling::Flatten => Mat::from_vec(1, p.len(), p.data.clone()),
        PromptPooling::MeanPool => {
            let mut row = Mat::zeros(1, p.cols);
            for r in 0..p.rows {
                for c in 0..p.cols {
                    *row.at_mut(0, c) += p.at(r, c) / p.rows as f64;
                }
            }
            row
        }
    }
}

/// `exp(cos(pB, pT) / tau)` over pooled prompt vectors. Zero-norm prompts
/// contribute cosine 0.
pub fn positive_similarity(pb: &Mat, pt: &Mat, tau: f64) -> f64 {
    positive_similarity_pooled(pb, pt, tau, PromptPooling::Flatten)
}

pub fn positive_similarity_pooled(pb: &Mat, pt: &Mat, tau: f64, pooling: PromptPooling) -> f64 {
    assert!(tau > 0.0, "tau must be positive");
    assert_eq!(
        (pb.rows, pb.cols),
        (pt.rows, pt.cols),
        "prompt shapes must match"
    );
    let a = pool_value(pb, pooling);
    let b = pool_value(pt, pooling);
    (cos_flat(&a, &b) / tau).exp()
}

/// Sum over `j != i` of the brain-brain and brain-text cross similarities
/// `exp(cos(P_B^i, P_B^j)/tau) + exp(cos(P_B^i, P_T^j)/tau)`.
pub fn negative_similarity(prompts_b: &[Mat], prompts_t: &[Mat], i: usize, tau: f64) -> f64 {
    negative_similarity_pooled(prompts_b, prompts_t, i, tau, PromptPooling::Flatten)
}

pub fn negative_similarity_pooled(
    prompts_b: &[Mat],
    prompts_t: &[Mat],
    i: usize,
    tau: f64,
    pooling: PromptPooling,
) -> f64 {
    assert!(tau > 0.0, "tau must be positive");
    assert!(prompts_b.len() >= 2, "need at least one negative");
    assert_eq!(prompts_b.len(), prompts_t.len());
    let bi = pool_value(&prompts_b[i], pooling);
    let mut s = 0.0;
    for j in 0..prompts_b.len() {
        if j == i {
            continue;
        }
        let bj = pool_value(&prompts_b[j], pooling);
        let tj = pool_value(&prompts_t[j], pooling);
        s += (cos_flat(&bi, &bj) / tau).exp() + (cos_flat(&bi, &tj) / tau).exp();
    }
    s
}

/// Plain-value contrastive loss: mean over i of the chosen log ratio.
/// Readable reference used for reporting; training uses the tape version.
pub fn contrastive_loss_value(
    prompts_b: &[Mat],
    prompts_t: &[Mat],
    tau: f64,
    form: ContrastiveForm,
    pooling: PromptPooling,
) -> f64 {
    let n = prompts_b.len();
    assert!(n >= 2, "contrastive term needs at least 2 windows");
    let mut acc = 0.0;
    for i in 0..n {
        let sp = positive_similarity_pooled(&prompts_b[i], &prompts_t[i], tau, pooling);
        let sn = negative_similarity_pooled(prompts_b, prompts_t, i, tau, pooling);
        let denom = match form {
            ContrastiveForm::Literal => sn,
            ContrastiveForm::InfoNce => sp + sn,
        };
        acc += -(sp / denom).ln();
    }
    acc / n as f64
}

/// Pool each prompt on the tape into one row, stacked to `[N x m]`.
fn pooled_rows(tape: &mut Tape, prompts: &[Var], pooling: PromptPooling) -> Var {
    let rows: Vec<Var> = prompts
        .iter()
        .map(|&p| {
            let m = tape.value(p);
            let (k, d) = (m.rows, m.cols);
            match pooling {
                PromptPooling::Flatten => tape.reshape(p, 1, k * d),
                PromptPooling::MeanPool => {
                    let avg = tape.constant(Mat::filled(1, k, 1.0 / k as f64));
                    tape.matmul(avg, p)
                }
            }
        })
        .collect();
    let mut stacked = rows[0];
    for &r in &rows[1..] {
        stacked = tape.concat_rows(stacked, r);
    }
    stacked
}

/// Differentiable contrastive loss over a batch of prompt pairs,
/// vectorized as two cosine matrices: row-normalize the pooled prompts,
/// take BxT and BxB Gram matrices, and read positives off the diagonal.
pub fn contrastive_loss(
    tape: &mut Tape,
    prompts_b: &[Var],
    prompts_t: &[Var],
    tau: f64,
    form: ContrastiveForm,
    pooling: PromptPooling,
) -> Result<Var> {
    let n = prompts_b.len();
    if n < 2 {
        return Err(Error::Validation(
            "contrastive term needs at least 2 windows in the batch".into(),
        ));
    }
    if prompts_t.len() != n {
        return Err(Error::Validation(format!(
            "{n} brain prompts vs {} text prompts",
            prompts_t.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let b_rows = pooled_rows(tape, prompts_b, pooling);
    let t_rows = pooled_rows(tape, prompts_t, pooling);
    let b_hat = tape.normalize_rows(b_rows);
    let t_hat = tape.normalize_rows(t_rows);
    let cos_bt = tape.matmul_nt(b_hat, t_hat);
    let cos_bb = tape.matmul_nt(b_hat, b_hat);
    let e_bt = {
        let s = tape.scale(cos_bt, 1.0 / tau);
        tape.exp(s)
    };
    let e_bb = {
        let s = tape.scale(cos_bb, 1.0 / tau);
        tape.exp(s)
    };
    // positives: diagonal of the brain-text matrix
    let s_p = tape.diag(e_bt);
    // negatives: off-diagonal sums of both matrices
    let off = Mat::from_fn(n, n, |r, c| if r == c { 0.0 } else { 1.0 });
    let bt_off = tape.mul_const(e_bt, off.clone());
    let bb_off = tape.mul_const(e_bb, off);
    let sum_bt = tape.sum_rows(bt_off);
    let sum_bb = tape.sum_rows(bb_off);
    let s_n = tape.add(sum_bt, sum_bb);
    let denom = match form {
        ContrastiveForm::Literal => s_n,
        ContrastiveForm::InfoNce => tape.add(s_p, s_n),
    };
    let log_p = tape.ln(s_p);
    let log_d = tape.ln(denom);
    let per_i = tape.sub(log_d, log_p);
    Ok(tape.mean_all(per_i))
}

/// Stage-1 loss: token-mean reconstruction from text prompts alone, with
/// the same report shape the combined loss produces. `alpha`/`tau` are
/// echoed into the report for log uniformity; neither affects the value.
pub fn text_total_loss(
    tape: &mut Tape,
    b: &Bound,
    lm: &ToyLm,
    prompts_t: &[Var],
    targets: &[Vec<usize>],
    alpha: f64,
    tau: f64,
) -> Result<(Var, LossReport)> {
    let (l_text, n_tokens) = text_reconstruction_loss(tape, b, lm, prompts_t, targets)?;
    let report = LossReport {
        l_text: Some(tape.value(l_text).item()),
        l_brain: None,
        l_contrast: None,
        l_total: tape.value(l_text).item(),
        alpha,
        tau,
        n_tokens,
    };
    Ok((l_text, report))
}

/// Combined training loss `l_brain + alpha * l_contrast`, with all
/// computed components reported. The contrastive term is skipped entirely
/// (not merely zero-weighted, and reported `None`) for singleton batches
/// or `alpha == 0`, so weight-zero runs never touch that code path.
pub fn total_loss(
    tape: &mut Tape,
    b: &Bound,
    lm: &ToyLm,
    batch: &Batch,
    alpha: f64,
    tau: f64,
    form: ContrastiveForm,
    pooling: PromptPooling,
) -> Result<(Var, LossReport)> {
    batch.validate(tape)?;
    let (l_brain, n_tokens) = brain_decoding_loss(tape, b, lm, &batch.prompts_b, &batch.targets)?;
    let l_contrast = if batch.len() >= 2 && alpha != 0.0 {
        let prompts_t = batch.prompts_t.as_ref().ok_or_else(|| {
            Error::Validation("contrastive loss needs text prompts in the batch".into())
        })?;
        Some(contrastive_loss(
            tape,
            &batch.prompts_b,
            prompts_t,
            tau,
            form,
            pooling,
        )?)
    } else {
        None
    };
    let total = match l_contrast {
        Some(lc) => {
            let scaled = tape.scale(lc, alpha);
            tape.add(l_brain, scaled)
        }
        None => l_brain,
    };
    let report = LossReport {
        l_text: None,
        l_brain: Some(tape.value(l_brain).item()),
        l_contrast: l_contrast.map(|lc| tape.value(lc).item()),
        l_total: tape.value(total).item(),
        alpha,
        tau,
        n_tokens,
    };
    Ok((total, report))
}
