//! A frozen linear map with one attached adapter, and its analytic gradients.

use rand::Rng;

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Gradients of one adapter, parameters in canonical order `A_0, B_0, A_1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub params: Vec<Matrix>,
    /// Gradient with respect to the adapter-path input.
    pub input: Matrix,
}

/// Backward pass of the adapter branch alone.
///
/// For block `i` with scale `s`, input block `x_i` and upstream block `g_i`:
/// `dB_i = s · g_i · (A_i x_i)ᵀ`, `dA_i = s · B_iᵀ g_i · x_iᵀ` and the input
/// gradient block is `s · A_iᵀ B_iᵀ g_i`.
pub fn adapter_backward(adapter: &Adapter, x: &Matrix, upstream: &Matrix) -> Result<AdapterGrads> {
    if x.rows() != adapter.d_in() || upstream.rows() != adapter.d_out() || x.cols() != upstream.cols() {
        return Err(Error::shape(
            "adapter backward (x vs upstream)",
            x.shape(),
            upstream.shape(),
        ));
    }
    let n = adapter.n();
    let (bi, bo) = (adapter.d_in() / n, adapter.d_out() / n);
    let s = adapter.scale();
    let mut params = Vec::with_capacity(2 * n);
    let mut input = Matrix::zeros(adapter.d_in(), x.cols());
    for (i, block) in adapter.blocks().iter().enumerate() {
        let xi = x.row_block(i * bi, (i + 1) * bi);
        let gi = upstream.row_block(i * bo, (i + 1) * bo);
        let hidden = block.a().matmul(&xi)?;
        let back = block.b().t_matmul(&gi)?;
        params.push(back.matmul_t(&xi)?.scale(s));
        params.push(gi.matmul_t(&hidden)?.scale(s));
        input.set_block(i * bi, 0, &block.a().t_matmul(&back)?.scale(s));
    }
    Ok(AdapterGrads { params, input })
}

/// What `forward_train` remembers for the matching backward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Adapter-path input after dropout.
    adapter_input: Matrix,
    /// Inverted-dropout multipliers, `None` when dropout is off.
    mask: Option<Matrix>,
}

/// Frozen base weight `w` (`d_out x d_in`) plus one adapter and gradient
/// buffers for the adapter's parameters. `w` has no mutable accessor.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    w: Matrix,
    adapter: Adapter,
    grads: Vec<Matrix>,
}

impl AdaptedLinear {
    pub fn new(w: Matrix, adapter: Adapter) -> Result<Self> {
        if w.shape() != (adapter.d_out(), adapter.d_in()) {
            return Err(Error::shape(
                "AdaptedLinear::new (w vs adapter d_out x d_in)",
                w.shape(),
                (adapter.d_out(), adapter.d_in()),
            ));
        }
        let grads = adapter
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(AdaptedLinear { w, adapter, grads })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut Adapter {
        &mut self.adapter
    }

    pub fn into_parts(self) -> (Matrix, Adapter) {
        (self.w, self.adapter)
    }

    pub fn grads(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.adapter.params_mut()
    }

    /// Inference forward: no dropout.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.adapter.forward(&self.w, x)
    }

    /// Training forward: inverted dropout on the adapter input only, one mask
    /// shared by every mini.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<(Matrix, ForwardCache)> {
        let p = self.adapter.dropout_p();
        let (adapter_input, mask) = if p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            let mask = Matrix::from_fn(
                x.rows(),
                x.cols(),
                |_, _| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                },
            );
            (x.hadamard(&mask)?, Some(mask))
        } else {
            (x.clone(), None)
        };
        let out = self.w.matmul(x)?.add(&self.adapter.forward_delta(&adapter_input)?)?;
        Ok((out, ForwardCache { adapter_input, mask }))
    }

    /// Fills the gradient buffers and returns the input gradient
    /// `Wᵀ g + (adapter input gradient)`.
    pub fn backward(&mut self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        let cache = ForwardCache {
            adapter_input: x.clone(),
            mask: None,
        };
        self.backward_cached(x, &cache, upstream)
    }

    pub fn backward_cached(&mut self, x: &Matrix, cache: &ForwardCache, upstream: &Matrix) -> Result<Matrix> {
        if upstream.shape() != (self.w.rows(), x.cols()) {
            return Err(Error::shape(
                "backward (upstream vs output)",
                upstream.shape(),
                (self.w.rows(), x.cols()),
            ));
        }
        let grads = adapter_backward(&self.adapter, &cache.adapter_input, upstream)?;
        self.grads = grads.params;
        let mut input = grads.input;
        if let Some(mask) = &cache.mask {
            input = input.hadamard(mask)?;
        }
        self.w.t_matmul(upstream)?.add(&input)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = Matrix::zeros(g.rows(), g.cols());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterMode, InitOptions};
    use crate::seeded_rng;
    use crate::train::loss::mse_loss;

    fn layer(n: usize, d: usize, r: usize, seed: u64, fill: bool) -> AdaptedLinear {
        let mut rng = seeded_rng(seed);
        let mode = if n == 1 { AdapterMode::Lora } else { AdapterMode::Melora };
        let mut ad = Adapter::init(mode, d, d, n, r, &InitOptions::with_alpha(4.0), seed).unwrap();
        if fill {
            ad.randomize_b(0.5, seed + 1);
        }
        AdaptedLinear::new(Matrix::gaussian(d, d, 0.3, &mut rng), ad).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut l = layer(2, 8, 1, 1, true);
        let x = Matrix::gaussian(8, 3, 1.0, &mut seeded_rng(0));
        let input = l.backward(&x, &Matrix::zeros(8, 3)).unwrap();
        assert!(l.grads().iter().all(|g| g.max_abs() == 0.0));
        assert_eq!(input.max_abs(), 0.0);
    }

    #[test]
    fn at_init_only_b_receives_gradient() {
        let mut l = layer(2, 8, 1, 2, false);
        let mut rng = seeded_rng(9);
        let x = Matrix::gaussian(8, 3, 1.0, &mut rng);
        let g = Matrix::gaussian(8, 3, 1.0, &mut rng);
        l.backward(&x, &g).unwrap();
        for (k, grad) in l.grads().iter().enumerate() {
            if k % 2 == 0 {
                assert_eq!(grad.max_abs(), 0.0, "dA_{}", k / 2);
            } else {
                assert!(grad.max_abs() > 0.0, "dB_{}", k / 2);
            }
        }
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        let mut l = layer(2, 8, 1, 3, true);
        let mut rng = seeded_rng(10);
        let x = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let target = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let (_, up) = mse_loss(&l.forward(&x).unwrap(), &target).unwrap();
        l.backward(&x, &up).unwrap();
        let analytic = l.grads().to_vec();
        let h = 1e-5;
        let loss_of = |l: &AdaptedLinear| mse_loss(&l.forward(&x).unwrap(), &target).unwrap().0;
        for (k, grad) in analytic.iter().enumerate() {
            for idx in 0..grad.as_slice().len() {
                let mut plus = l.clone();
                plus.params_mut()[k].as_mut_slice()[idx] += h;
                let mut minus = l.clone();
                minus.params_mut()[k].as_mut_slice()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grad.as_slice()[idx];
                let diff = (fd - an).abs();
                assert!(
                    diff <= 1e-9 || diff / fd.abs().max(an.abs()) < 1e-6,
                    "param {k}[{idx}]: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut l = layer(4, 8, 2, 4, true);
        let mut rng = seeded_rng(11);
        let x = Matrix::gaussian(8, 2, 1.0, &mut rng);
        let target = Matrix::gaussian(8, 2, 1.0, &mut rng);
        let (_, up) = mse_loss(&l.forward(&x).unwrap(), &target).unwrap();
        let dx = l.backward(&x, &up).unwrap();
        let h = 1e-5;
        for idx in 0..16 {
            let mut plus = x.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = (mse_loss(&l.forward(&plus).unwrap(), &target).unwrap().0
                - mse_loss(&l.forward(&minus).unwrap(), &target).unwrap().0)
                / (2.0 * h);
            assert!((fd - dx.as_slice()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn block_gradient_ignores_other_blocks() {
        let l = layer(2, 8, 1, 5, true);
        let mut rng = seeded_rng(12);
        let x = Matrix::gaussian(8, 3, 1.0, &mut rng);
        let g = Matrix::gaussian(8, 3, 1.0, &mut rng);
        let full = adapter_backward(l.adapter(), &x, &g).unwrap();
        let mut x0 = x.clone();
        let mut g0 = g.clone();
        for r in 4..8 {
            for c in 0..3 {
                x0.set(r, c, 0.0);
                g0.set(r, c, 0.0);
            }
        }
        let local = adapter_backward(l.adapter(), &x0, &g0).unwrap();
        assert_eq!(full.params[0], local.params[0]);
        assert_eq!(full.params[1], local.params[1]);
    }

    #[test]
    fn dropout_masks_only_the_adapter_path() {
        let mut ad = Adapter::init(
            AdapterMode::Melora,
            8,
            8,
            2,
            1,
            &InitOptions {
                alpha: 4.0,
                dropout_p: 0.5,
                init_std: None,
            },
            0,
        )
        .unwrap();
        ad.randomize_b(1.0, 1);
        let w = Matrix::gaussian(8, 8, 1.0, &mut seeded_rng(2));
        let l = AdaptedLinear::new(w.clone(), ad).unwrap();
        let x = Matrix::gaussian(8, 6, 1.0, &mut seeded_rng(3));
        let (out, cache) = l.forward_train(&x, &mut seeded_rng(4)).unwrap();
        let mask = cache.mask.as_ref().unwrap();
        assert!(mask.as_slice().iter().all(|m| *m == 0.0 || *m == 2.0));
        let expected = w
            .matmul(&x)
            .unwrap()
            .add(&l.adapter().forward_delta(&x.hadamard(mask).unwrap()).unwrap())
            .unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn rejects_mismatched_base() {
        let ad = Adapter::init(AdapterMode::Lora, 4, 6, 1, 1, &InitOptions::default(), 0).unwrap();
        assert!(AdaptedLinear::new(Matrix::zeros(4, 6), ad).is_err());
    }
}
