//! Closed-form parameter, rank and operation counts.

use crate::adapters::check_divisible;
use crate::error::{Error, Result};

/// Trainable parameters of one adapted `d_out x d_in` matrix:
/// `n · (d_in/n · r_mini + r_mini · d_out/n) = r_mini · (d_in + d_out)`.
///
/// With `n = 1` this is the LoRA count `d_out · r + r · d_in`. Note that the
/// count does not depend on `n` for a fixed per-mini rank.
pub fn count_params(d_in: usize, d_out: usize, n: usize, r_mini: usize) -> Result<u64> {
    check_divisible(d_in, d_out, n)?;
    let per_mini = (d_in / n) * r_mini + r_mini * (d_out / n);
    Ok((n * per_mini) as u64)
}

/// `n · r_mini`, the rank of a block-diagonal update with full-rank blocks.
pub fn equivalent_rank(n: usize, r_mini: usize) -> usize {
    n * r_mini
}

/// Multiply-accumulates of the adapter path for one input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    /// All minis evaluated one after another: `2rd / n`.
    pub serial_ops: u64,
    /// Minis evaluated concurrently, cost of one mini: `2rd / n²`.
    pub parallel_critical_path: u64,
}

/// Operation counts at total rank `r` (so `r_mini = r / n`) on a square
/// `d x d` base. `n = 1` gives LoRA's `2rd` for both.
pub fn flop_count(d: usize, r: usize, n: usize) -> Result<FlopCount> {
    check_divisible(d, d, n)?;
    if !r.is_multiple_of(n) {
        return Err(Error::NotDivisible {
            what: "r".into(),
            dim: r,
            n,
        });
    }
    let per_mini = 2 * (r / n) * (d / n);
    Ok(FlopCount {
        serial_ops: (n * per_mini) as u64,
        parallel_critical_path: per_mini as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_and_melora_counts_for_roberta_matrices() {
        assert_eq!(count_params(768, 768, 1, 8).unwrap(), 12_288);
        for n in [2, 4, 8] {
            assert_eq!(count_params(768, 768, n, 1).unwrap(), 1_536);
        }
        assert_eq!(count_params(768, 768, 2, 4).unwrap(), 6_144);
        assert_eq!(count_params(768, 768, 1, 8).unwrap() * 24, 294_912);
        assert_eq!(count_params(768, 768, 8, 1).unwrap() * 24, 36_864);
        assert_eq!(count_params(768, 768, 2, 4).unwrap() * 24, 147_456);
    }

    #[test]
    fn rectangular_and_divisibility() {
        assert_eq!(count_params(12, 6, 3, 2).unwrap(), 36);
        assert!(matches!(count_params(10, 10, 3, 1), Err(Error::NotDivisible { .. })));
        assert!(count_params(12, 10, 4, 1).is_err());
    }

    #[test]
    fn equivalent_ranks() {
        assert_eq!(equivalent_rank(8, 1), 8);
        assert_eq!(equivalent_rank(1, 8), 8);
        assert_eq!(equivalent_rank(2, 4), 8);
    }

    #[test]
    fn flop_counts() {
        assert_eq!(
            flop_count(768, 8, 1).unwrap(),
            FlopCount {
                serial_ops: 12_288,
                parallel_critical_path: 12_288
            }
        );
        assert_eq!(
            flop_count(768, 8, 4).unwrap(),
            FlopCount {
                serial_ops: 3_072,
                parallel_critical_path: 768
            }
        );
        assert!(flop_count(768, 6, 4).is_err());
        assert!(flop_count(770, 8, 4).is_err());
    }
}
