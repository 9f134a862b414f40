//! Siamese capsule-network embeddings for ground-to-aerial image retrieval.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! differentiation engine, on top of which sit the residual
//! [`backbone`], the [`capsules`] layers with dynamic routing, the
//! two-branch [`model`], the hard-mining [`objective`], the training loop
//! in [`train`], retrieval metrics in [`eval`], and the run-level plumbing
//! ([`config`], [`checkpoint`], [`app`]) used by the command-line tool.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};

pub mod backbone;
pub mod capsules;
pub mod model;
pub mod objective;
pub mod data;
pub mod train;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod app;

use serde::{Deserialize, Serialize};

/// Train mode normalises with batch statistics and records running
/// averages; eval mode uses the running averages only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which side of the Siamese pair an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Ground,
    Satellite,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Ground => "ground",
            Branch::Satellite => "satellite",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground" => Ok(Branch::Ground),
            "satellite" => Ok(Branch::Satellite),
            other => Err(Error::Config(format!(
                "unknown branch {other:?}, expected \"ground\" or \"satellite\""
            ))),
        }
    }
}
