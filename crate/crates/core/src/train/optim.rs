use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Per-tensor AdamW moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: AdamWConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update: `p -= lr·wd·p`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape("adamw step (param vs grad)", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].as_slice();
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
                *w -= lr * weight_decay * *w;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    base_lr: f64,
    warmup_steps: usize,
    total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {base_lr}")));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::InvalidArgument(format!(
                "need warmup_steps < total_steps, got {warmup_steps} and {total_steps}"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Warmup given as a fraction of the run, rounded to the nearest step.
    pub fn with_warmup_ratio(base_lr: f64, ratio: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("warmup ratio {ratio} outside [0, 1)")));
        }
        Self::new(base_lr, (ratio * total_steps as f64).round() as usize, total_steps)
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.base_lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}
