//! Window-level text-similarity metrics — BLEU-1, METEOR, BERTScore —
//! and their aggregation into story scores.
//!
//! All metrics tokenize the same way: lowercase, whitespace-split words.
//! Story scores are plain arithmetic means over windows. BERTScore reads
//! token embeddings through a provider interface; the shipped backend is
//! a deterministic hash-bucket one-hot embedder, so identical tokens
//! score 1 and distinct tokens score 0 without any model download.

use crate::tensor::Mat;
use crate::{Error, Result};
use std::collections::HashMap;

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Clipped unigram precision times the brevity penalty `exp(1 - r/c)`
/// (1 when the candidate is at least as long as the reference). Empty
/// candidates score 0.
pub fn bleu1(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Validation("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w.as_str()).or_insert(0) += 1;
    }
    let mut matched = 0usize;
    for w in candidate {
        if let Some(c) = ref_counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let precision = matched as f64 / candidate.len() as f64;
    let bp = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    Ok(precision * bp)
}

/// Exact-match METEOR: harmonic F-mean with recall weighted 9:1, scaled
/// by the fragmentation penalty `0.5 * (chunks/matches)^3`. No stemming
/// or synonym stages. Zero matches score 0.
pub fn meteor(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Validation("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    // greedy exact alignment: each candidate token takes the first
    // unmatched identical reference token, scanning left to right
    let mut taken = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new(); // (cand pos, ref pos)
    for (ci, w) in candidate.iter().enumerate() {
        for (ri, r) in reference.iter().enumerate() {
            if !taken[ri] && r == w {
                taken[ri] = true;
                pairs.push((ci, ri));
                break;
            }
        }
    }
    let m = pairs.len() as f64;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let alpha = 0.9; // recall weight
    let f_mean = p * r / (alpha * p + (1.0 - alpha) * r);
    // chunks: maximal runs of pairs contiguous in both strings
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        let ((c0, r0), (c1, r1)) = (w[0], w[1]);
        if c1 != c0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    Ok(f_mean * (1.0 - penalty))
}

/// Source of token embeddings for BERTScore. Must be deterministic per
/// input sequence.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    /// `[T x dim]` embeddings for the token sequence.
    fn embed(&self, tokens: &[String]) -> Result<Mat>;
}

/// Deterministic offline embedder: each token maps to a one-hot vector
/// whose index is a hash bucket. Identical tokens are identical vectors;
/// distinct tokens are orthogonal unless their hashes collide (choose
/// `dim` large relative to the vocabulary to make that negligible).
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 8192 }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Result<Mat> {
        let mut m = Mat::zeros(tokens.len(), self.dim);
        for (i, t) in tokens.iter().enumerate() {
            let j = (crate::util::hash_str(t) % self.dim as u64) as usize;
            *m.at_mut(i, j) = 1.0;
        }
        Ok(m)
    }
}

/// Greedy-matching BERTScore F1: precision is each candidate token's best
/// cosine against the reference, recall the reverse, F1 their harmonic
/// mean. No baseline rescaling. Empty candidates score 0.
pub fn bertscore(
    candidate: &[String],
    reference: &[String],
    emb: &dyn EmbeddingProvider,
) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Validation("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let c = emb.embed(candidate)?;
    let r = emb.embed(reference)?;
    if c.cols != r.cols {
        return Err(Error::Shape {
            expected: format!("embedding dim {}", c.cols),
            got: format!("{}", r.cols),
        });
    }
    let norm = |m: &Mat, i: usize| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = |a: &Mat, i: usize, b: &Mat, j: usize| {
        let (na, nb) = (norm(a, i), norm(b, j));
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / (na * nb)
    };
    let mut precision = 0.0;
    for i in 0..c.rows {
        let best = (0..r.rows)
            .map(|j| cos(&c, i, &r, j))
            .fold(f64::NEG_INFINITY, f64::max);
        precision += best;
    }
    precision /= c.rows as f64;
    let mut recall = 0.0;
    for j in 0..r.rows {
        let best = (0..c.rows)
            .map(|i| cos(&c, i, &r, j))
            .fold(f64::NEG_INFINITY, f64::max);
        recall += best;
    }
    recall /= r.rows as f64;
    if precision + recall <= 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Metric triple for one window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowScores {
    pub bleu1: f64,
    pub meteor: f64,
    pub bertscore: f64,
}

/// Per-window scores plus their arithmetic means.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub meteor: f64,
    pub bertscore: f64,
    pub n_windows: usize,
    pub per_window: Vec<WindowScores>,
}

/// Score parallel candidate/reference word lists and average over
/// windows.
pub fn evaluate_story(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    emb: &dyn EmbeddingProvider,
) -> Result<MetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Validation("no windows to evaluate".into()));
    }
    let mut per_window = Vec::with_capacity(candidates.len());
    for (c, r) in candidates.iter().zip(references) {
        per_window.push(WindowScores {
            bleu1: bleu1(c, r)?,
            meteor: meteor(c, r)?,
            bertscore: bertscore(c, r, emb)?,
        });
    }
    let n = per_window.len() as f64;
    Ok(MetricReport {
        bleu1: per_window.iter().map(|w| w.bleu1).sum::<f64>() / n,
        meteor: per_window.iter().map(|w| w.meteor).sum::<f64>() / n,
        bertscore: per_window.iter().map(|w| w.bertscore).sum::<f64>() / n,
        n_windows: per_window.len(),
        per_window,
    })
}
