// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod fake_bm;
pub mod hedging;
pub mod marginal;
pub mod numerics;
pub mod simulate;
pub mod two_marginal;

pub use error::{Error, Result};
