//! Summed (serial) low-rank products versus block-diagonal placement.

use crate::error::{Error, Result};
use crate::matrix::{block_diag, rank, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackingDemo {
    /// Rank of `Σ_j B_j A_j` on the full `d x d` space.
    pub serial_rank: usize,
    /// Rank of `block_diag(B_j A_j)` with the same per-term rank and the same
    /// column sharing.
    pub block_diag_rank: usize,
    /// Columns each `B_j` copies from `B_{j-1}`: `ceil(overlap · r)`.
    pub shared_columns: usize,
}

const RANK_TOL: f64 = 1e-8;

/// Builds `num_stacked` rank-`r` products whose left factors share the first
/// `ceil(overlap · r)` columns with their predecessor, then measures the
/// rank of their sum and of their block-diagonal arrangement.
pub fn serial_stack_rank_demo(num_stacked: usize, r: usize, d: usize, overlap: f64, seed: u64) -> Result<StackingDemo> {
    if num_stacked == 0 || r == 0 {
        return Err(Error::InvalidArgument("num_stacked and r must be positive".into()));
    }
    if num_stacked * r > d {
        return Err(Error::InvalidArgument(format!(
            "infeasible: num_stacked * r = {} exceeds d = {d}",
            num_stacked * r
        )));
    }
    if !d.is_multiple_of(num_stacked) {
        return Err(Error::NotDivisible {
            what: "d".into(),
            dim: d,
            n: num_stacked,
        });
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside [0, 1]")));
    }
    let shared = ((overlap * r as f64).ceil() as usize).min(r);
    let mut rng = crate::seeded_rng(seed);

    let left_factors = |rows: usize, rng: &mut crate::Rng| -> Vec<Matrix> {
        let mut out: Vec<Matrix> = Vec::with_capacity(num_stacked);
        for j in 0..num_stacked {
            let mut b = Matrix::gaussian(rows, r, 1.0, rng);
            if j > 0 && shared > 0 {
                b.set_block(0, 0, &out[j - 1].col_block(0, shared));
            }
            out.push(b);
        }
        out
    };

    let serial_b = left_factors(d, &mut rng);
    let mut sum = Matrix::zeros(d, d);
    for b in &serial_b {
        let a = Matrix::gaussian(r, d, 1.0, &mut rng);
        sum.axpy(1.0, &b.matmul(&a)?)?;
    }

    let block = d / num_stacked;
    let block_b = left_factors(block, &mut rng);
    let products = block_b
        .iter()
        .map(|b| b.matmul(&Matrix::gaussian(r, block, 1.0, &mut rng)))
        .collect::<Result<Vec<_>>>()?;

    Ok(StackingDemo {
        serial_rank: rank(&sum, RANK_TOL)?,
        block_diag_rank: rank(&block_diag(&products)?, RANK_TOL)?,
        shared_columns: shared,
    })
}
