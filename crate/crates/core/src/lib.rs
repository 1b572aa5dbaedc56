//! Differentiable search over per-module tuning schemes (frozen, adapter,
//! fine-tune) for cascaded multi-task models.

pub mod cascade;
pub mod cell;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod objective;
pub mod search;

pub use error::{Error, Result};
