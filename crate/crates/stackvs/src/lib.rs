//! Stacked visual-semantic attention captioning decoder.
//!
//! A coarse-to-fine stack of decoder cells, each coupling a visual and a
//! semantic attention branch with a language LSTM, trained per-stage with
//! cross-entropy and fine-tuned with self-critical policy gradients using
//! a CIDEr reward. Everything runs on a small 64-bit tape-based autodiff
//! engine so gradients are checkable by finite differences.

pub mod attention;
pub mod cell;
pub mod data;
pub mod metrics;
pub mod selfcheck;
pub mod stack;
pub mod tensor;
pub mod trainer;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
