//! Two-stage multi-view representation learning.
//!
//! Stage I learns a compact view-consistent code `c` by masked cross-view
//! prediction; stage II freezes that encoder and learns per-view specific codes
//! `s^i` whose mutual information with `c` is pushed down through a CLUB upper
//! bound. The remaining modules build datasets, audit residual redundancy with
//! MINE, and evaluate the codes by clustering and classification.

pub mod consistency;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod mi_audit;
pub mod masking;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

/// `round(x)` with halves rounded up; used for every "round(ratio·count)" in the crate.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}
