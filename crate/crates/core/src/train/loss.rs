use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Mean squared error over all entries and its gradient `2 (pred - target) / count`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred
        .sub(target)
        .map_err(|_| Error::shape("mse_loss", pred.shape(), target.shape()))?;
    let count = diff.as_slice().len();
    if count == 0 {
        return Err(Error::Empty("mse_loss"));
    }
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / count as f64;
    Ok((loss, diff.scale(2.0 / count as f64)))
}

/// Column-wise softmax cross-entropy; `logits` is `classes x batch`.
///
/// Returns the mean negative log-likelihood of the true classes and the
/// gradient `(softmax - onehot) / batch`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (classes, batch) = logits.shape();
    if labels.len() != batch {
        return Err(Error::shape("cross_entropy_loss", logits.shape(), (1, labels.len())));
    }
    if batch == 0 || classes == 0 {
        return Err(Error::Empty("cross_entropy_loss"));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("cross_entropy_loss logits"));
    }
    let probs = softmax_columns(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (j, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let col: Vec<f64> = logits.column(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= col[label] - max - log_sum;
        grad.set(label, j, grad.get(label, j) - 1.0);
    }
    let b = batch as f64;
    Ok((loss / b, grad.scale(1.0 / b)))
}

/// Max-subtracted softmax of each column.
pub fn softmax_columns(logits: &Matrix) -> Matrix {
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        let max = (0..rows).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..rows).map(|i| (logits.get(i, j) - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

/// Fraction of columns whose arg-max equals the label (first index wins ties).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(j, &label)| argmax_column(logits, *j) == label)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax_column(m: &Matrix, col: usize) -> usize {
    let mut best = 0;
    for i in 1..m.rows() {
        if m.get(i, col) > m.get(best, col) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn mse_hand_cases() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let (l, g) = mse_loss(&m, &m).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        let (l, g) = mse_loss(&m.map(|v| v + 1.0), &m).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.5));
        assert!(mse_loss(&m, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = seeded_rng(3);
        let p = Matrix::gaussian(5, 7, 1.0, &mut rng);
        let t = Matrix::gaussian(5, 7, 1.0, &mut rng);
        let mut s = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                let d = p.get(i, j) - t.get(i, j);
                s += d * d;
            }
        }
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert!((l - s / 35.0).abs() < 1e-12);
        for i in 0..5 {
            for j in 0..7 {
                assert!((g.get(i, j) - 2.0 * (p.get(i, j) - t.get(i, j)) / 35.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let (l, _) = cross_entropy_loss(&Matrix::zeros(5, 3), &[0, 4, 2]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_true_logit_is_stable() {
        let mut logits = Matrix::zeros(3, 1);
        logits.set(1, 0, 1e4);
        let (l, g) = cross_entropy_loss(&logits, &[1]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(g.is_finite());
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(&Matrix::zeros(3, 1), &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(17);
        let logits = Matrix::gaussian(4, 3, 2.0, &mut rng);
        let labels = [2, 0, 3];
        let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus.set(i, j, plus.get(i, j) + h);
                let mut minus = logits.clone();
                minus.set(i, j, minus.get(i, j) - h);
                let fd = (cross_entropy_loss(&plus, &labels).unwrap().0
                    - cross_entropy_loss(&minus, &labels).unwrap().0)
                    / (2.0 * h);
                let err = (fd - g.get(i, j)).abs() / fd.abs().max(g.get(i, j).abs()).max(1e-9);
                assert!(err < 1e-6, "({i},{j}) fd {fd} analytic {}", g.get(i, j));
            }
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        assert!((accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
