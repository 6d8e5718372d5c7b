//! Teacher-student recovery and synthetic classification.

use crate::adapters::{Adapter, AdapterMode};
use crate::analysis::{rank_profile, RankProfile};
use crate::error::Result;
use crate::harness::config::{RunConfig, Task, TeacherKind};
use crate::matrix::{block_diag, svd, Matrix};
use crate::train::{accuracy, mse_loss, train, AdaptedLinear, BatchSource, Targets, TrainReport};
use crate::Rng;

/// Frozen base, teacher update and held-out inputs, all drawn from
/// `task.data_seed`.
#[derive(Debug, Clone)]
pub struct TeacherData {
    pub w0: Matrix,
    pub delta: Matrix,
    pub test_x: Matrix,
}

impl TeacherData {
    pub fn generate(task: &Task) -> Result<Self> {
        task.validate()?;
        let mut rng = crate::seeded_rng(task.data_seed);
        let (d, d_out) = (task.d, task.d_out());
        let w0 = Matrix::gaussian(d_out, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let delta = teacher_update(task, &mut rng)?;
        let test_x = Matrix::gaussian(d, task.test_size, 1.0, &mut rng);
        Ok(TeacherData { w0, delta, test_x })
    }

    pub fn target(&self) -> Matrix {
        self.w0.add(&self.delta).expect("teacher shapes agree")
    }
}

/// `scale · U Vᵀ` of rank `true_rank`. Block teachers use
/// `U = block_diag(u_i)`, `V = block_diag(v_i)` so the update is block diagonal.
pub fn teacher_update(task: &Task, rng: &mut Rng) -> Result<Matrix> {
    let (d, d_out, k) = (task.d, task.d_out(), task.true_rank);
    if k == 0 {
        return Ok(Matrix::zeros(d_out, d));
    }
    let (u, v) = match task.teacher {
        TeacherKind::Dense => (
            Matrix::gaussian(d_out, k, 1.0 / (d_out as f64).sqrt(), rng),
            Matrix::gaussian(d, k, 1.0 / (d as f64).sqrt(), rng),
        ),
        TeacherKind::Block => {
            let (bo, bi) = (d_out / k, d / k);
            let mut us = Vec::with_capacity(k);
            let mut vs = Vec::with_capacity(k);
            for _ in 0..k {
                us.push(Matrix::gaussian(bo, 1, 1.0 / (bo as f64).sqrt(), rng));
                vs.push(Matrix::gaussian(bi, 1, 1.0 / (bi as f64).sqrt(), rng));
            }
            (block_diag(&us)?, block_diag(&vs)?)
        }
    };
    Ok(u.matmul_t(&v)?.scale(task.teacher_scale))
}

/// Fresh Gaussian batches labelled by a fixed linear teacher.
struct TeacherStream {
    target: Matrix,
    rng: Rng,
    batch: usize,
    classify: bool,
}

impl BatchSource for TeacherStream {
    fn batch(&mut self, _step: usize) -> Result<(Matrix, Targets)> {
        let x = Matrix::gaussian(self.target.cols(), self.batch, 1.0, &mut self.rng);
        let y = self.target.matmul(&x)?;
        Ok(if self.classify {
            (x, Targets::Classes(argmax_labels(&y)))
        } else {
            (x, Targets::Values(y))
        })
    }
}

fn argmax_labels(logits: &Matrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|j| crate::train::argmax_column(logits, j))
        .collect()
}

fn stream_seed(run: &RunConfig) -> u64 {
    run.task.data_seed ^ run.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn adapted_layer(run: &RunConfig, w0: Matrix) -> Result<AdaptedLinear> {
    let adapter = Adapter::init(
        run.mode,
        run.task.d,
        run.task.d_out(),
        if run.mode == AdapterMode::Lora { 1 } else { run.n },
        run.r_mini,
        &run.init_options(),
        run.seed,
    )?;
    AdaptedLinear::new(w0, adapter)
}

#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub train: TrainReport,
    pub initial_test_mse: f64,
    pub test_mse: f64,
    /// Loss on the last training batch; compare with `test_mse` for the gap.
    pub final_train_loss: Option<f64>,
    /// Smallest test MSE any update of rank `equivalent_rank` can reach:
    /// the tail energy `Σ_{j>q} σ_j²` of `ΔW* · X_test` over the entry count.
    pub eckart_young_floor: f64,
    pub teacher_singular_values: Vec<f64>,
    pub profile: RankProfile,
    pub params: u64,
    pub equivalent_rank: usize,
    pub adapter: Adapter,
}

/// Trains an adapter on the frozen base to match the teacher and reports
/// test error against the rank-limited optimum.
pub fn run_recovery(run: &RunConfig) -> Result<RecoveryReport> {
    let data = TeacherData::generate(&run.task)?;
    let target = data.target();
    let mut layer = adapted_layer(run, data.w0.clone())?;
    let test_y = target.matmul(&data.test_x)?;
    let test_mse = |layer: &AdaptedLinear| -> Result<f64> { Ok(mse_loss(&layer.forward(&data.test_x)?, &test_y)?.0) };
    let initial_test_mse = test_mse(&layer)?;

    let mut stream = TeacherStream {
        target,
        rng: crate::seeded_rng(stream_seed(run)),
        batch: run.batch,
        classify: false,
    };
    let report = train(&mut layer, &mut stream, &run.train_config())?;

    let q = layer.adapter().equivalent_rank();
    let residual_sv = svd(&data.delta.matmul(&data.test_x)?)?.singular_values;
    let entries = (run.task.d_out() * run.task.test_size) as f64;
    let eckart_young_floor = residual_sv.iter().skip(q).map(|s| s * s).sum::<f64>() / entries;

    Ok(RecoveryReport {
        initial_test_mse,
        test_mse: test_mse(&layer)?,
        final_train_loss: report.final_loss(),
        eckart_young_floor,
        teacher_singular_values: svd(&data.delta)?.singular_values,
        profile: rank_profile(layer.adapter(), run.threshold, true)?,
        params: layer.adapter().param_count(),
        equivalent_rank: q,
        adapter: layer.adapter().clone(),
        train: report,
    })
}

#[derive(Debug, Clone)]
pub struct ClassifyReport {
    pub train: TrainReport,
    pub baseline_accuracy: f64,
    pub test_accuracy: f64,
    pub final_train_loss: Option<f64>,
    pub profile: RankProfile,
    pub params: u64,
    pub equivalent_rank: usize,
    pub adapter: Adapter,
}

/// Cross-entropy fine-tune towards labels from `argmax((W₀ + ΔW*) x)`.
pub fn run_classify(run: &RunConfig) -> Result<ClassifyReport> {
    let data = TeacherData::generate(&run.task)?;
    let target = data.target();
    let labels = argmax_labels(&target.matmul(&data.test_x)?);
    let mut layer = adapted_layer(run, data.w0.clone())?;
    let baseline_accuracy = accuracy(&layer.forward(&data.test_x)?, &labels);
    let mut stream = TeacherStream {
        target,
        rng: crate::seeded_rng(stream_seed(run)),
        batch: run.batch,
        classify: true,
    };
    let report = train(&mut layer, &mut stream, &run.train_config())?;
    Ok(ClassifyReport {
        baseline_accuracy,
        test_accuracy: accuracy(&layer.forward(&data.test_x)?, &labels),
        final_train_loss: report.final_loss(),
        profile: rank_profile(layer.adapter(), run.threshold, true)?,
        params: layer.adapter().param_count(),
        equivalent_rank: layer.adapter().equivalent_rank(),
        adapter: layer.adapter().clone(),
        train: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{ExperimentConfig, TaskKind};
    use crate::matrix::rank;

    fn recovery(n: usize, r_mini: usize, steps: usize) -> RunConfig {
        let mut c = ExperimentConfig::default();
        c.task.d = 32;
        c.task.true_rank = 4;
        c.steps = steps;
        c.warmup = steps / 10;
        c.run(n, r_mini, 1)
    }

    #[test]
    fn teacher_has_requested_rank_and_structure() {
        for teacher in [TeacherKind::Block, TeacherKind::Dense] {
            let task = Task {
                teacher,
                ..Task::default()
            };
            let data = TeacherData::generate(&task).unwrap();
            assert_eq!(rank(&data.delta, 1e-8).unwrap(), 4);
            if teacher == TeacherKind::Block {
                // off-block entries are exact zeros
                assert_eq!(data.delta.get(0, 63), 0.0);
                assert_eq!(data.delta.get(63, 0), 0.0);
            }
        }
        let a = TeacherData::generate(&Task::default()).unwrap();
        let b = TeacherData::generate(&Task::default()).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.test_x, b.test_x);
    }

    #[test]
    fn zero_rank_teacher_is_exact_at_init() {
        let mut run = recovery(4, 1, 0);
        run.task.true_rank = 0;
        let report = run_recovery(&run).unwrap();
        assert!(report.test_mse < 1e-10);
        assert_eq!(report.profile.count, 0);
        assert!(report.train.records.is_empty());
    }

    #[test]
    fn recovery_is_deterministic_per_seed() {
        let a = run_recovery(&recovery(4, 1, 50)).unwrap();
        let b = run_recovery(&recovery(4, 1, 50)).unwrap();
        assert_eq!(a.test_mse.to_bits(), b.test_mse.to_bits());
        assert_eq!(a.adapter, b.adapter);
    }

    #[test]
    fn test_mse_never_beats_the_rank_floor() {
        let report = run_recovery(&recovery(2, 1, 300)).unwrap();
        assert!(report.eckart_young_floor > 0.0);
        assert!(report.test_mse >= report.eckart_young_floor);
        assert!(report.test_mse < report.initial_test_mse);
    }

    #[test]
    fn classification_starts_from_the_frozen_baseline() {
        let mut c = ExperimentConfig::default();
        c.task.kind = TaskKind::Classify;
        c.task.d = 16;
        c.task.classes = 4;
        c.task.true_rank = 2;
        c.task.teacher_scale = 3.0;
        c.steps = 0;
        let zero = run_classify(&c.run(2, 1, 3)).unwrap();
        assert_eq!(zero.test_accuracy, zero.baseline_accuracy);
        c.steps = 400;
        c.warmup = 20;
        c.lr = 1e-2;
        let trained = run_classify(&c.run(2, 1, 3)).unwrap();
        assert!(trained.test_accuracy > zero.baseline_accuracy);
    }
}
