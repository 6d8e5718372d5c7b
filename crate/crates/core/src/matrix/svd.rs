//! One-sided Jacobi SVD and threshold rank.

use super::Matrix;
use crate::error::{Error, Result};

/// A column pair counts as orthogonal once `|u_p·u_q| <= SVD_TOLERANCE * |u_p| |u_q|`.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 100;

/// Thin SVD `m = U · diag(σ) · Vᵀ` with `k = min(rows, cols)` singular triplets.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows x k`, orthonormal columns.
    pub left_vectors: Matrix,
    /// `cols x k`, orthonormal columns.
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let us = Matrix::from_fn(self.left_vectors.rows(), k, |r, c| {
            self.left_vectors.get(r, c) * self.singular_values[c]
        });
        us.matmul_t(&self.right_vectors)
            .expect("svd factors have consistent shapes")
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.singular_values.iter().filter(|s| **s > threshold).count()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::Empty("svd"));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        });
    }
    let (rows, n) = m.shape();
    let mut u: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns of rank-deficient inputs shrink to roundoff noise, where the
    // relative orthogonality test can never settle; treat them as zero.
    let negligible = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if alpha <= negligible || beta <= negligible || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = u.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNotConverged { sweeps: SVD_MAX_SWEEPS });
    }

    let norms: Vec<f64> = u.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| norms[*b].total_cmp(&norms[*a]));

    let mut left = Matrix::zeros(rows, n);
    let mut right = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        singular_values.push(sigma);
        for (r, &value) in v[j].iter().enumerate() {
            right.set(r, k, value);
        }
        if sigma * sigma > negligible {
            for (r, &value) in u[j].iter().enumerate() {
                left.set(r, k, value / sigma);
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut left, &missing);

    Ok(SvdResult {
        singular_values,
        left_vectors: left,
        right_vectors: right,
    })
}

pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.singular_values)
}

/// Number of singular values strictly greater than `threshold`.
pub fn rank(m: &Matrix, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rank threshold must be positive and finite, got {threshold}"
        )));
    }
    Ok(svd(m)?.count_above(threshold))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to
/// every other column, using Gram-Schmidt over the standard basis.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (rows, cols) = u.shape();
    let mut filled: Vec<usize> = (0..cols).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < rows, "ran out of basis vectors");
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj: f64 = (0..rows).map(|r| u.get(r, f) * e[r]).sum();
                    for (r, x) in e.iter_mut().enumerate() {
                        *x -= proj * u.get(r, f);
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                for (r, x) in e.iter().enumerate() {
                    u.set(r, k, x / norm);
                }
                filled.push(k);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::block_diag;
    use crate::seeded_rng;

    fn orthonormality_error(m: &Matrix) -> f64 {
        m.t_matmul(m)
            .unwrap()
            .sub(&Matrix::identity(m.cols()))
            .unwrap()
            .max_abs()
    }

    #[test]
    fn diagonal_input() {
        let s = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
        let s = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_zero_values_and_orthonormal_factors() {
        let s = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(s.singular_values.iter().all(|v| *v == 0.0));
        assert!(orthonormality_error(&s.left_vectors) < 1e-12);
        assert!(orthonormality_error(&s.right_vectors) < 1e-12);
    }

    #[test]
    fn rank_two_product_has_two_values_above_tolerance() {
        let mut rng = seeded_rng(11);
        let b = Matrix::gaussian(8, 2, 1.0, &mut rng);
        let a = Matrix::gaussian(2, 8, 1.0, &mut rng);
        let s = svd(&b.matmul(&a).unwrap()).unwrap();
        assert_eq!(s.count_above(1e-8), 2);
        assert!(s.singular_values[2..].iter().all(|v| *v < 1e-8));
    }

    #[test]
    fn wide_and_tall_inputs_reconstruct() {
        let mut rng = seeded_rng(5);
        for (r, c) in [(3, 7), (7, 3), (1, 5), (5, 1), (6, 6)] {
            let m = Matrix::gaussian(r, c, 1.0, &mut rng);
            let s = svd(&m).unwrap();
            assert_eq!(s.left_vectors.shape(), (r, r.min(c)));
            assert_eq!(s.right_vectors.shape(), (c, r.min(c)));
            let err = s.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(err < 1e-12, "{r}x{c}: {err}");
            assert!(orthonormality_error(&s.left_vectors) < 1e-10);
            assert!(orthonormality_error(&s.right_vectors) < 1e-10);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_thresholds() {
        assert_eq!(rank(&Matrix::identity(5), 0.1).unwrap(), 5);
        assert_eq!(rank(&Matrix::zeros(5, 5), 0.1).unwrap(), 0);
        // strict inequality
        assert_eq!(rank(&Matrix::diag(&[1.0, 0.1]), 0.1).unwrap(), 1);
        assert!(rank(&Matrix::identity(2), 0.0).is_err());
        assert!(rank(&Matrix::identity(2), f64::NAN).is_err());
    }

    #[test]
    fn block_diag_of_gaussian_blocks_is_full_rank() {
        let mut rng = seeded_rng(21);
        let blocks: Vec<Matrix> = (0..4).map(|_| Matrix::gaussian(4, 4, 1.0, &mut rng)).collect();
        assert_eq!(rank(&block_diag(&blocks).unwrap(), 1e-8).unwrap(), 16);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(Error::Empty(_))));
    }
}
