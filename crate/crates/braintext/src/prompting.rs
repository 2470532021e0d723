//! Prompt construction: a frozen text encoder plus the mappers that turn
//! token embeddings or fMRI frames into fixed-length prompt vectors.
//!
//! Both the text arm and the brain arm produce a `[k x d_out]` prompt
//! block. Inputs of any length (including empty) are read through `k`
//! learned query rows attached to a bidirectional transformer trunk, so
//! downstream code can rely on a fixed prompt shape.

use crate::ckpt::{Bound, ParamSet};
use crate::corpus::Window;
use crate::lm::{init_block, linear, transformer_block};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::{Error, Result};
use rand::Rng;

/// Deterministic, parameterless token embedder. Each token's vector is a
/// fixed pseudo-random draw keyed by the token string and `seed`, so the
/// encoding is identical across processes and trivially frozen: it has no
/// weights to drift.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TextEncoder {
    pub d_enc: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub fn new(d_enc: usize, seed: u64) -> TextEncoder {
        TextEncoder { d_enc, seed }
    }

    /// `[T x d_enc]` embedding matrix for `words`; `T = 0` is fine.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Mat {
        let mut data = Vec::with_capacity(words.len() * self.d_enc);
        for w in words {
            let key = crate::util::hash_str(w.as_ref()) ^ self.seed.wrapping_mul(0x9e3779b97f4a7c15);
            data.extend(crate::util::seeded_normals(key, self.d_enc));
        }
        Mat::from_vec(words.len(), self.d_enc, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MapperConfig {
    /// Input row width: text-encoder dim for the text arm, ROI voxel count
    /// for the brain arm.
    pub d_in: usize,
    /// Trunk width.
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Prompt length: number of output rows.
    pub k: usize,
    /// Output row width; must match the LM embedding dim.
    pub d_out: usize,
    /// Longest accepted input sequence.
    pub max_in: usize,
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0
            || self.width == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.k == 0
            || self.d_out == 0
            || self.max_in == 0
        {
            return Err(Error::Config("mapper dimensions must be positive".into()));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "mapper width {} not divisible by n_heads {}",
                self.width, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Variable-length input rows -> fixed `[k x d_out]` prompt block.
///
/// `k` learned query rows are prepended to the projected input, a
/// bidirectional (unmasked) transformer trunk mixes them, and the query
/// rows are read out through a final projection.
#[derive(Debug, Clone)]
pub struct PromptMapper {
    pub prefix: String,
    pub cfg: MapperConfig,
}

impl PromptMapper {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        cfg: MapperConfig,
        rng: &mut impl Rng,
    ) -> Result<PromptMapper> {
        cfg.validate()?;
        let std = 0.02;
        params.register(
            format!("{prefix}.w_in"),
            crate::util::randn(rng, cfg.d_in, cfg.width, std),
        )?;
        params.register(format!("{prefix}.b_in"), Mat::zeros(1, cfg.width))?;
        params.register(
            format!("{prefix}.queries"),
            crate::util::randn(rng, cfg.k, cfg.width, std),
        )?;
        params.register(
            format!("{prefix}.pos"),
            crate::util::randn(rng, cfg.max_in, cfg.width, std),
        )?;
        for l in 0..cfg.n_layers {
            init_block(params, &format!("{prefix}.l{l}"), cfg.width, std, rng)?;
        }
        params.register(format!("{prefix}.lnf.g"), Mat::filled(1, cfg.width, 1.0))?;
        params.register(format!("{prefix}.lnf.b"), Mat::zeros(1, cfg.width))?;
        params.register(
            format!("{prefix}.w_out"),
            crate::util::randn(rng, cfg.width, cfg.d_out, std),
        )?;
        params.register(format!("{prefix}.b_out"), Mat::zeros(1, cfg.d_out))?;
        Ok(PromptMapper {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    /// Map `[T x d_in]` input rows to the `[k x d_out]` prompt block.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, input: Var) -> Result<Var> {
        let (t, d_in) = {
            let m = tape.value(input);
            (m.rows, m.cols)
        };
        if t > 0 && d_in != self.cfg.d_in {
            return Err(Error::Shape {
                expected: format!("mapper input width {}", self.cfg.d_in),
                got: format!("{d_in}"),
            });
        }
        if t > self.cfg.max_in {
            return Err(Error::Length(format!(
                "mapper input length {t} exceeds max_in {}",
                self.cfg.max_in
            )));
        }
        let p = |s: &str| format!("{}.{s}", self.prefix);
        let queries = b.var(&p("queries"));
        let mut x = if t == 0 {
            queries
        } else {
            let proj = linear(tape, b, input, &p("w_in"), &p("b_in"));
            let pos_ids: Vec<usize> = (0..t).collect();
            let pos = tape.gather_rows(b.var(&p("pos")), &pos_ids);
            let proj = tape.add(proj, pos);
            tape.concat_rows(queries, proj)
        };
        for l in 0..self.cfg.n_layers {
            x = transformer_block(tape, b, &format!("{}.l{l}", self.prefix), x, self.cfg.n_heads, None);
        }
        let head = tape.slice_rows(x, 0, self.cfg.k);
        let normed = {
            let g = b.var(&p("lnf.g"));
            let bb = b.var(&p("lnf.b"));
            tape.layer_norm_rows(head, g, bb)
        };
        Ok(linear(tape, b, normed, &p("w_out"), &p("b_out")))
    }
}

/// Text-arm prompt for a word sequence: frozen encoding fed through the
/// text mapper. The encoding enters the tape as a constant, so no
/// gradient can reach the encoder.
pub fn text_prompt<S: AsRef<str>>(
    tape: &mut Tape,
    b: &Bound,
    mapper: &PromptMapper,
    encoder: &TextEncoder,
    words: &[S],
) -> Result<Var> {
    let emb = tape.constant(encoder.encode(words));
    mapper.forward(tape, b, emb)
}

/// Brain-arm prompt for a window: its fMRI frames fed through the brain
/// mapper.
pub fn brain_prompt(tape: &mut Tape, b: &Bound, mapper: &PromptMapper, window: &Window) -> Result<Var> {
    let frames = tape.constant(window.frames.clone());
    mapper.forward(tape, b, frames)
}
