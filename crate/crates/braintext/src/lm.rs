//! Word-level vocabulary and a small decoder-only transformer LM.
//!
//! The LM consumes an optional prompt — a block of embedding-space rows
//! prepended to the token sequence — and scores vocabulary words
//! autoregressively. It is sized for desk-scale experiments: a couple of
//! pre-norm blocks over a word vocabulary, trained from scratch.

use crate::ckpt::{Bound, ParamSet};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::{Error, Result};
use rand::Rng;
use std::collections::{BTreeSet, HashMap};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Token ids for a word vocabulary plus the start/TR marks used by
/// annotated targets. Ids are stable for a given word set. Serializes as
/// a bare token list.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl serde::Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let mut v = Vocab {
            tokens,
            ids: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }
}

impl Vocab {
    /// Specials first (`<pad>`, `<unk>`, start mark, TR mark), then the
    /// unique words in sorted order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut tokens = vec![
            PAD.to_string(),
            UNK.to_string(),
            crate::corpus::START_MARK.to_string(),
            crate::corpus::TR_MARK.to_string(),
        ];
        let special: BTreeSet<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let uniq: BTreeSet<&str> = words
            .into_iter()
            .filter(|w| !special.contains(w))
            .collect();
        tokens.extend(uniq.into_iter().map(|s| s.to_string()));
        let mut v = Vocab {
            tokens,
            ids: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn start_id(&self) -> usize {
        2
    }

    pub fn tr_id(&self) -> usize {
        3
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Map tokens to ids, substituting `<unk>` for out-of-vocabulary words.
    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        tokens
            .into_iter()
            .map(|t| self.id(t).unwrap_or(self.unk_id()))
            .collect()
    }

    /// Whitespace-split and encode.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(text.split_whitespace())
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            max_seq: 256,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Decoder-only pre-norm transformer over a word vocabulary. Weights live
/// in a [`ParamSet`] under `prefix`; the struct itself is just shape info.
#[derive(Debug, Clone)]
pub struct ToyLm {
    pub prefix: String,
    pub cfg: LmConfig,
    pub vocab_size: usize,
}

impl ToyLm {
    /// Register freshly initialized weights under `prefix` and return the
    /// model handle.
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: LmConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<ToyLm> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        let d = cfg.d_model;
        let std = 0.02;
        params.register(format!("{prefix}.emb"), crate::util::randn(rng, vocab_size, d, std))?;
        params.register(format!("{prefix}.pos"), crate::util::randn(rng, cfg.max_seq, d, std))?;
        for l in 0..cfg.n_layers {
            init_block(params, &format!("{prefix}.l{l}"), d, std, rng)?;
        }
        params.register(format!("{prefix}.lnf.g"), Mat::filled(1, d, 1.0))?;
        params.register(format!("{prefix}.lnf.b"), Mat::zeros(1, d))?;
        params.register(format!("{prefix}.wout"), crate::util::randn(rng, d, vocab_size, std))?;
        params.register(format!("{prefix}.bout"), Mat::zeros(1, vocab_size))?;
        Ok(ToyLm {
            prefix: prefix.to_string(),
            cfg,
            vocab_size,
        })
    }

    /// Rebuild the handle for weights already present in a loaded
    /// [`ParamSet`].
    pub fn attach(params: &ParamSet, prefix: &str, cfg: LmConfig) -> Result<ToyLm> {
        cfg.validate()?;
        let emb = params.get(&format!("{prefix}.emb"))?;
        Ok(ToyLm {
            prefix: prefix.to_string(),
            cfg,
            vocab_size: emb.rows,
        })
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// Token + position embeddings for `ids`, with `prompt` rows (already
    /// in embedding space) prepended when given. Positions cover the full
    /// prompt+text sequence.
    fn embed(&self, tape: &mut Tape, b: &Bound, prompt: Option<Var>, ids: &[usize]) -> Result<Var> {
        let k = prompt.map(|p| tape.value(p).rows).unwrap_or(0);
        let s = k + ids.len();
        if s == 0 {
            return Err(Error::Length("empty sequence".into()));
        }
        if s > self.cfg.max_seq {
            return Err(Error::Length(format!(
                "sequence length {s} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let tok = tape.gather_rows(b.var(&self.p("emb")), ids);
        let x = match prompt {
            Some(p) => {
                if tape.value(p).cols != self.cfg.d_model {
                    return Err(Error::Shape {
                        expected: format!("prompt width {}", self.cfg.d_model),
                        got: format!("{}", tape.value(p).cols),
                    });
                }
                if ids.is_empty() {
                    p
                } else {
                    tape.concat_rows(p, tok)
                }
            }
            None => tok,
        };
        let pos_ids: Vec<usize> = (0..s).collect();
        let pos = tape.gather_rows(b.var(&self.p("pos")), &pos_ids);
        Ok(tape.add(x, pos))
    }

    /// Full forward pass; returns logits `[k + ids.len(), vocab_size]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prompt: Option<Var>,
        ids: &[usize],
    ) -> Result<Var> {
        let mut x = self.embed(tape, b, prompt, ids)?;
        let s = tape.value(x).rows;
        let mask = causal_mask(s);
        for l in 0..self.cfg.n_layers {
            let p = format!("{}.l{l}", self.prefix);
            x = transformer_block(tape, b, &p, x, self.cfg.n_heads, Some(&mask));
        }
        let xf = {
            let g = b.var(&self.p("lnf.g"));
            let bb = b.var(&self.p("lnf.b"));
            tape.layer_norm_rows(x, g, bb)
        };
        Ok(linear(tape, b, xf, &self.p("wout"), &self.p("bout")))
    }

    /// Summed next-token cross entropy of `ids` given `prompt`, plus the
    /// number of scored positions.
    ///
    /// With a prompt, every token of `ids` is scored (the first from the
    /// last prompt row). Without one, the first token is the unseen
    /// context and only the remaining `ids.len() - 1` are scored.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prompt: Option<Var>,
        ids: &[usize],
    ) -> Result<(Var, usize)> {
        let k = prompt.map(|p| tape.value(p).rows).unwrap_or(0);
        if k == 0 && ids.len() < 2 {
            return Err(Error::Length(
                "need at least 2 tokens to score without a prompt".into(),
            ));
        }
        if k > 0 && ids.is_empty() {
            return Err(Error::Length("no tokens to score".into()));
        }
        let logits = self.forward(tape, b, prompt, ids)?;
        let (lo, hi, targets) = if k > 0 {
            (k - 1, k + ids.len() - 1, ids.to_vec())
        } else {
            (0, ids.len() - 1, ids[1..].to_vec())
        };
        let scored = tape.slice_rows(logits, lo, hi);
        let loss = tape.cross_entropy_sum(scored, &targets);
        Ok((loss, targets.len()))
    }

    /// Logits for the next token after `ids` (given `prompt`): the last
    /// row of the forward pass, as a plain vector.
    pub fn next_token_logits(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prompt: Option<Var>,
        ids: &[usize],
    ) -> Result<Vec<f64>> {
        let logits = self.forward(tape, b, prompt, ids)?;
        let m = tape.value(logits);
        Ok(m.row(m.rows - 1).to_vec())
    }
}

pub(crate) fn linear(tape: &mut Tape, b: &Bound, x: Var, w: &str, bias: &str) -> Var {
    let xw = tape.matmul(x, b.var(w));
    tape.add_row(xw, b.var(bias))
}

/// Register the weights of one pre-norm attention + feed-forward block
/// under `p`. Width is inferred from `d`; the MLP expands 4x.
pub(crate) fn init_block(
    params: &mut ParamSet,
    p: &str,
    d: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    params.register(format!("{p}.ln1.g"), Mat::filled(1, d, 1.0))?;
    params.register(format!("{p}.ln1.b"), Mat::zeros(1, d))?;
    for w in ["wq", "wk", "wv", "wo"] {
        params.register(format!("{p}.{w}"), crate::util::randn(rng, d, d, std))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.register(format!("{p}.{b}"), Mat::zeros(1, d))?;
    }
    params.register(format!("{p}.ln2.g"), Mat::filled(1, d, 1.0))?;
    params.register(format!("{p}.ln2.b"), Mat::zeros(1, d))?;
    params.register(format!("{p}.w1"), crate::util::randn(rng, d, 4 * d, std))?;
    params.register(format!("{p}.b1"), Mat::zeros(1, 4 * d))?;
    params.register(format!("{p}.w2"), crate::util::randn(rng, 4 * d, d, std))?;
    params.register(format!("{p}.b2"), Mat::zeros(1, d))?;
    Ok(())
}

/// One pre-norm transformer block: `x + attn(ln1(x))`, then
/// `x + mlp(ln2(x))`. `mask` is an additive attention bias (the causal
/// mask for decoding; `None` for bidirectional encoders).
pub(crate) fn transformer_block(
    tape: &mut Tape,
    b: &Bound,
    p: &str,
    x: Var,
    n_heads: usize,
    mask: Option<&Mat>,
) -> Var {
    let d = tape.value(x).cols;
    let dh = d / n_heads;
    let ln1 = {
        let g = b.var(&format!("{p}.ln1.g"));
        let bb = b.var(&format!("{p}.ln1.b"));
        tape.layer_norm_rows(x, g, bb)
    };
    let q = linear(tape, b, ln1, &format!("{p}.wq"), &format!("{p}.bq"));
    let k = linear(tape, b, ln1, &format!("{p}.wk"), &format!("{p}.bk"));
    let v = linear(tape, b, ln1, &format!("{p}.wv"), &format!("{p}.bv"));
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qh = tape.slice_cols(q, i * dh, (i + 1) * dh);
        let kh = tape.slice_cols(k, i * dh, (i + 1) * dh);
        let vh = tape.slice_cols(v, i * dh, (i + 1) * dh);
        let scores = tape.matmul_nt(qh, kh);
        let mut scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scaled = tape.add_const(scaled, m.clone());
        }
        let probs = tape.softmax_rows(scaled);
        heads.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&heads);
    let attn = linear(tape, b, ctx, &format!("{p}.wo"), &format!("{p}.bo"));
    let x = tape.add(x, attn);
    let ln2 = {
        let g = b.var(&format!("{p}.ln2.g"));
        let bb = b.var(&format!("{p}.ln2.b"));
        tape.layer_norm_rows(x, g, bb)
    };
    let hmid = linear(tape, b, ln2, &format!("{p}.w1"), &format!("{p}.b1"));
    let act = tape.gelu(hmid);
    let ff = linear(tape, b, act, &format!("{p}.w2"), &format!("{p}.b2"));
    tape.add(x, ff)
}

/// Additive causal mask: 0 at or below the diagonal, a large negative
/// value above it.
pub fn causal_mask(s: usize) -> Mat {
    Mat::from_fn(s, s, |r, c| if c > r { -1e30 } else { 0.0 })
}

/// Greedy argmax with deterministic tie-breaking (lowest id wins).
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
