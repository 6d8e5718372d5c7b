//! MELoRA: mini-ensemble low-rank adapters.
//!
//! A MELoRA adapter splits the input features of a frozen linear map into `n`
//! contiguous blocks and trains an independent rank-`r_mini` LoRA pair on each
//! block. The resulting update is block diagonal, so its rank is the sum of
//! the per-block ranks (`n * r_mini`) while the trainable parameter count
//! stays at `r_mini * (d_in + d_out)`.
//!
//! The crate is organised bottom-up:
//!
//! - [`matrix`]: dense matrices, one-sided Jacobi SVD, threshold rank, block diagonals.
//! - [`adapters`]: [`LoraAdapter`], [`MeloraAdapter`], the [`Adapter`] sum type,
//!   forward passes in every equivalent form, merging, accounting and the
//!   binary checkpoint format.
//! - [`train`]: analytic gradients, losses, AdamW, the linear warmup schedule
//!   and a deterministic training loop.
//! - [`analysis`]: parameter audits over model-shape presets, rank profiles,
//!   and the serial-stacking rank demonstration.
//! - [`harness`]: desk-scale experiments (low-rank recovery, classification,
//!   single-head attention with adapters on the query and value projections)
//!   and the seed sweep runner.
//! - [`verify`]: the invariant suite behind `melora verify`.
//! - [`cli`]: argument parsing and command dispatch for the `melora` binary.

pub mod adapters;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod train;
pub mod verify;

pub use adapters::{Adapter, AdapterMode, LoraAdapter, MeloraAdapter};
pub use error::{Error, Result};
pub use matrix::{block_diag, rank, svd, Matrix, SvdResult};

use rand::SeedableRng;

/// Generator used for every seeded draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Shortest round-trip text for CSV cells; scientific outside `[1e-4, 1e6)`
/// so tiny losses stay readable.
pub(crate) fn format_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e6).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn float_cells() {
        assert_eq!(super::format_f64(0.0), "0");
        assert_eq!(super::format_f64(0.5), "0.5");
        assert_eq!(super::format_f64(1.5e-22), "1.5e-22");
        assert_eq!(super::format_f64(-2e7), "-2e7");
        assert_eq!(super::format_f64(f64::NAN), "NaN");
    }
}
