use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default LoRA scaling numerator.
pub const DEFAULT_ALPHA: f64 = 16.0;

/// Initialisation knobs shared by LoRA and MELoRA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub alpha: f64,
    pub dropout_p: f64,
    /// Standard deviation of the Gaussian fill of `A`. `None` means `1 / r`.
    pub init_std: Option<f64>,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            alpha: DEFAULT_ALPHA,
            dropout_p: 0.0,
            init_std: None,
        }
    }
}

impl InitOptions {
    pub fn with_alpha(alpha: f64) -> Self {
        InitOptions {
            alpha,
            ..Default::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if let Some(std) = self.init_std {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::InvalidArgument(format!("bad init std {std}")));
            }
        }
        Ok(())
    }
}

/// One low-rank pair: `ΔW = (alpha / r) · B · A` with `A: r x d_in`, `B: d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
    dropout_p: f64,
    seed: u64,
}

impl LoraAdapter {
    /// Gaussian `A` (std `1/r`), zero `B`, dropout off.
    pub fn init(d_in: usize, d_out: usize, r: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        let mut adapter = Self::init_with_rng(d_in, d_out, r, &InitOptions::with_alpha(alpha), &mut rng)?;
        adapter.seed = seed;
        Ok(adapter)
    }

    pub fn init_with_options(d_in: usize, d_out: usize, r: usize, opts: &InitOptions, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        let mut adapter = Self::init_with_rng(d_in, d_out, r, opts, &mut rng)?;
        adapter.seed = seed;
        Ok(adapter)
    }

    pub(crate) fn init_with_rng<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        r: usize,
        opts: &InitOptions,
        rng: &mut R,
    ) -> Result<Self> {
        opts.validate()?;
        let max = d_in.min(d_out);
        if r == 0 || r > max {
            return Err(Error::RankOutOfRange { rank: r, max });
        }
        let std = opts.init_std.unwrap_or(1.0 / r as f64);
        Ok(LoraAdapter {
            a: Matrix::gaussian(r, d_in, std, rng),
            b: Matrix::zeros(d_out, r),
            alpha: opts.alpha,
            dropout_p: opts.dropout_p,
            seed: 0,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, alpha: f64, dropout_p: f64) -> Result<Self> {
        InitOptions {
            alpha,
            dropout_p,
            init_std: None,
        }
        .validate()?;
        if a.rows() != b.cols() {
            return Err(Error::shape("LoraAdapter::from_parts", b.shape(), a.shape()));
        }
        let r = a.rows();
        let max = a.cols().min(b.rows());
        if r == 0 || r > max {
            return Err(Error::RankOutOfRange { rank: r, max });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("LoraAdapter::from_parts"));
        }
        Ok(LoraAdapter {
            a,
            b,
            alpha,
            dropout_p,
            seed: 0,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `[A, B]`, the trainable tensors in canonical order.
    pub fn params_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.a, &mut self.b]
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        InitOptions::with_alpha(alpha).validate()?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> u64 {
        (self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()) as u64
    }

    /// Unscaled `B · A`.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors have consistent shapes")
    }

    /// `(alpha / r) · B · A`.
    pub fn delta_weight(&self) -> Matrix {
        self.product().scale(self.scale())
    }

    /// `(alpha / r) · B · (A · x)`.
    pub fn forward_delta(&self, x: &Matrix) -> Result<Matrix> {
        let mut macs = 0;
        self.forward_delta_counted(x, &mut macs)
    }

    pub(crate) fn forward_delta_counted(&self, x: &Matrix, macs: &mut u64) -> Result<Matrix> {
        if x.rows() != self.d_in() {
            return Err(Error::shape("lora forward (A · x)", self.a.shape(), x.shape()));
        }
        let ax = self.a.matmul_counted(x, macs)?;
        Ok(self.b.matmul_counted(&ax, macs)?.scale(self.scale()))
    }

    /// `W · x + (alpha / r) · B · A · x`; `w` is not modified.
    pub fn forward(&self, w: &Matrix, x: &Matrix) -> Result<Matrix> {
        check_base(w, self.d_in(), self.d_out())?;
        w.matmul(x)?.add(&self.forward_delta(x)?)
    }

    pub fn merge(&self, w: &Matrix) -> Result<Matrix> {
        check_base(w, self.d_in(), self.d_out())?;
        w.add(&self.delta_weight())
    }
}

pub(crate) fn check_base(w: &Matrix, d_in: usize, d_out: usize) -> Result<()> {
    if w.shape() != (d_out, d_in) {
        return Err(Error::shape(
            "base weight vs adapter (d_out x d_in)",
            w.shape(),
            (d_out, d_in),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn init_has_zero_b_and_seeded_a() {
        let l = LoraAdapter::init(12, 10, 3, 16.0, 9).unwrap();
        assert!(l.b().as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(l.a().shape(), (3, 12));
        assert_eq!(l.b().shape(), (10, 3));
        let again = LoraAdapter::init(12, 10, 3, 16.0, 9).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(l.a()), bits(again.a()));
        assert_ne!(bits(l.a()), bits(LoraAdapter::init(12, 10, 3, 16.0, 10).unwrap().a()));
    }

    #[test]
    fn init_rejects_bad_rank_and_hyperparameters() {
        assert!(matches!(
            LoraAdapter::init(4, 6, 5, 16.0, 0),
            Err(Error::RankOutOfRange { rank: 5, max: 4 })
        ));
        assert!(LoraAdapter::init(4, 6, 0, 16.0, 0).is_err());
        assert!(LoraAdapter::init(4, 6, 2, 0.0, 0).is_err());
        let opts = InitOptions {
            dropout_p: 1.0,
            ..Default::default()
        };
        assert!(LoraAdapter::init_with_options(4, 6, 2, &opts, 0).is_err());
    }

    #[test]
    fn init_is_a_no_op_on_forward() {
        let mut rng = seeded_rng(2);
        let l = LoraAdapter::init(6, 5, 2, 16.0, 3).unwrap();
        let w = Matrix::gaussian(5, 6, 1.0, &mut rng);
        let x = Matrix::gaussian(6, 4, 1.0, &mut rng);
        assert_eq!(l.forward(&w, &x).unwrap(), w.matmul(&x).unwrap());
    }

    #[test]
    fn unit_scale_matches_dense_update() {
        let mut rng = seeded_rng(4);
        let a = Matrix::gaussian(3, 7, 1.0, &mut rng);
        let b = Matrix::gaussian(6, 3, 1.0, &mut rng);
        let l = LoraAdapter::from_parts(a.clone(), b.clone(), 3.0, 0.0).unwrap();
        let w = Matrix::gaussian(6, 7, 1.0, &mut rng);
        let x = Matrix::gaussian(7, 5, 1.0, &mut rng);
        let dense = w.add(&b.matmul(&a).unwrap()).unwrap().matmul(&x).unwrap();
        assert!(l.forward(&w, &x).unwrap().sub(&dense).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn contribution_is_linear_in_alpha() {
        let mut rng = seeded_rng(8);
        let a = Matrix::gaussian(2, 5, 1.0, &mut rng);
        let b = Matrix::gaussian(5, 2, 1.0, &mut rng);
        let x = Matrix::gaussian(5, 3, 1.0, &mut rng);
        let mut l = LoraAdapter::from_parts(a, b, 4.0, 0.0).unwrap();
        let once = l.forward_delta(&x).unwrap();
        l.set_alpha(8.0).unwrap();
        let twice = l.forward_delta(&x).unwrap();
        assert!(twice.sub(&once.scale(2.0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let l = LoraAdapter::init(4, 3, 1, 16.0, 0).unwrap();
        assert!(l.forward(&Matrix::zeros(4, 3), &Matrix::zeros(4, 1)).is_err());
        assert!(l.forward(&Matrix::zeros(3, 4), &Matrix::zeros(3, 1)).is_err());
        assert!(l.merge(&Matrix::zeros(4, 4)).is_err());
        assert!(LoraAdapter::from_parts(Matrix::zeros(2, 4), Matrix::zeros(3, 1), 1.0, 0.0).is_err());
    }
}
