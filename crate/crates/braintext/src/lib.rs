//! Brain-to-text decoding toolkit.
//!
//! Decodes the text of auditory stimuli from windowed fMRI recordings by
//! turning each window into a sequence of prompt vectors that drive an
//! autoregressive decoder language model. Ships a text-to-text baseline
//! (text encoder -> prompt mapper -> LM), a contrastive objective that
//! aligns fMRI prompts to text prompts, two generation stop strategies,
//! a metrics harness, and a synthetic-subject generator so the whole
//! pipeline can be exercised end to end on a laptop.

pub mod ckpt;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod infer;
pub mod lm;
pub mod objectives;
pub mod prompting;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod util;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config problems exit 2, data/parse problems exit 3, everything else 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("sequence length error: {0}")]
    Length(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 for config errors, 3 for data errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Validation(_) => 3,
            _ => 1,
        }
    }
}
