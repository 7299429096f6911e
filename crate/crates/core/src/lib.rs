pub mod data;
pub mod error;
pub(crate) mod linalg;
pub mod ssmmc;

pub use error::{HfdError, Result};
pub mod unsup_mmc;
pub mod hierarchy;
pub mod metric;
pub mod synth;
pub mod ann;
pub mod eval;
pub mod config;
pub mod cli;
