use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::train::layer::AdaptedLinear;
use crate::train::loss::{cross_entropy_loss, mse_loss};
use crate::train::optim::{AdamWConfig, LrSchedule, OptimizerState};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub adamw: AdamWConfig,
    /// Seeds the dropout masks and anything else the objective samples.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 5e-4,
            warmup_steps: 100,
            adamw: AdamWConfig::default(),
            seed: 42,
        }
    }
}

/// Anything with trainable tensors and a differentiable loss.
pub trait Objective {
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    /// Loss at training step `step` and gradients in `params_mut` order.
    fn loss_and_grads(&mut self, step: usize, rng: &mut Rng) -> Result<(f64, Vec<Matrix>)>;
}

#[derive(Debug, Clone)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

/// Supplies one `(inputs, targets)` batch per step.
pub trait BatchSource {
    fn batch(&mut self, step: usize) -> Result<(Matrix, Targets)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// CSV with header `step,lr,loss,grad_norm,wall_ms`. The timing column
    /// is left empty unless `record_timing` is set, so reruns of the same
    /// seed produce identical files.
    pub fn write_csv<W: Write>(&self, record_timing: bool, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "lr", "loss", "grad_norm", "wall_ms"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                crate::format_f64(r.lr),
                crate::format_f64(r.loss),
                crate::format_f64(r.grad_norm),
                if record_timing {
                    format!("{:.3}", r.wall_ms)
                } else {
                    String::new()
                },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `config.steps` AdamW steps on the linear warmup/decay schedule.
///
/// Deterministic for a given seed: all randomness flows from one generator
/// seeded with `config.seed`. A non-finite loss aborts with
/// [`Error::Diverged`].
pub fn train_objective<O: Objective + ?Sized>(objective: &mut O, config: &TrainConfig) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if config.steps == 0 {
        return Ok(report);
    }
    let schedule = LrSchedule::new(config.lr, config.warmup_steps, config.steps)?;
    let mut rng = crate::seeded_rng(config.seed);
    let mut opt = {
        let params = objective.params_mut();
        OptimizerState::new(config.adamw, params.iter().map(|p| &**p))
    };
    let start = Instant::now();
    for step in 0..config.steps {
        let (loss, grads) = match objective.loss_and_grads(step, &mut rng) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        let lr = schedule.lr(step);
        let mut params = objective.params_mut();
        opt.step(&mut params, &grads, lr)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        report.records.push(TrainRecord {
            step,
            lr,
            loss,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(report)
}

struct LayerObjective<'a, S: ?Sized> {
    layer: &'a mut AdaptedLinear,
    source: &'a mut S,
}

impl<S: BatchSource + ?Sized> Objective for LayerObjective<'_, S> {
    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layer.params_mut()
    }

    fn loss_and_grads(&mut self, step: usize, rng: &mut Rng) -> Result<(f64, Vec<Matrix>)> {
        let (x, targets) = self.source.batch(step)?;
        let (out, cache) = self.layer.forward_train(&x, rng)?;
        let (loss, upstream) = match &targets {
            Targets::Values(t) => mse_loss(&out, t)?,
            Targets::Classes(labels) => cross_entropy_loss(&out, labels)?,
        };
        self.layer.backward_cached(&x, &cache, &upstream)?;
        Ok((loss, self.layer.grads().to_vec()))
    }
}

/// Trains the adapter of `layer` on batches from `task`. The base weight is
/// never touched.
pub fn train<S: BatchSource + ?Sized>(
    layer: &mut AdaptedLinear,
    task: &mut S,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_objective(&mut LayerObjective { layer, source: task }, config)
}
