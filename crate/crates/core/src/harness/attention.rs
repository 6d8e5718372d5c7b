//! Single-head softmax attention with adapters on the query and value
//! projections only; key, output and readout stay frozen.
//!
//! The synthetic task is associative recall. A sequence holds `seq_len - 1`
//! memory slots, each the sum of a key embedding and a value embedding, and
//! ends with a query slot holding one of the keys. The target is the value
//! stored with that key.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::adapters::{Adapter, AdapterMode};
use crate::analysis::{rank_profile, RankProfile};
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, Task, TaskKind};
use crate::matrix::Matrix;
use crate::train::{
    accuracy, cross_entropy_loss, softmax_columns, train_objective, AdaptedLinear, ForwardCache, Objective, TrainReport,
};
use crate::Rng;

/// Frozen token embeddings for keys and values, `d x vocab` each.
#[derive(Debug, Clone)]
pub struct AssociativeRecall {
    pub key_embed: Matrix,
    pub value_embed: Matrix,
    pub seq_len: usize,
}

/// `count` sequences laid out column-wise.
#[derive(Debug, Clone)]
pub struct RecallBatch {
    /// `d x (count · seq_len)`; sequence `b` owns columns `b·L .. (b+1)·L`.
    pub tokens: Matrix,
    /// `d x count`: the final (query) column of each sequence.
    pub queries: Matrix,
    pub labels: Vec<usize>,
}

impl AssociativeRecall {
    pub fn new(d: usize, vocab: usize, seq_len: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AssociativeRecall {
            key_embed: Matrix::gaussian(d, vocab, std, rng),
            value_embed: Matrix::gaussian(d, vocab, std, rng),
            seq_len,
        }
    }

    pub fn vocab(&self) -> usize {
        self.key_embed.cols()
    }

    pub fn sample(&self, count: usize, rng: &mut Rng) -> RecallBatch {
        let (d, vocab, len) = (self.key_embed.rows(), self.vocab(), self.seq_len);
        let mut tokens = Matrix::zeros(d, count * len);
        let mut queries = Matrix::zeros(d, count);
        let mut labels = Vec::with_capacity(count);
        let mut keys: Vec<usize> = (0..vocab).collect();
        for b in 0..count {
            keys.shuffle(rng);
            let values: Vec<usize> = (0..len - 1).map(|_| rng.random_range(0..vocab)).collect();
            for slot in 0..len - 1 {
                for r in 0..d {
                    let v = self.key_embed.get(r, keys[slot]) + self.value_embed.get(r, values[slot]);
                    tokens.set(r, b * len + slot, v);
                }
            }
            let asked = rng.random_range(0..len - 1);
            for r in 0..d {
                let v = self.key_embed.get(r, keys[asked]);
                tokens.set(r, b * len + len - 1, v);
                queries.set(r, b, v);
            }
            labels.push(values[asked]);
        }
        RecallBatch {
            tokens,
            queries,
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionModel {
    pub query: AdaptedLinear,
    pub key: Matrix,
    pub value: AdaptedLinear,
    pub output: Matrix,
    /// `vocab x d`.
    pub readout: Matrix,
    pub seq_len: usize,
}

struct AttentionCache {
    q_cache: ForwardCache,
    v_cache: ForwardCache,
    keys: Matrix,
    values: Matrix,
    queries: Matrix,
    probs: Vec<Matrix>,
}

impl AttentionModel {
    /// Frozen projections drawn from `rng`; readout is the transposed value
    /// embedding so logits compare the attended value with every token.
    pub fn new(task: &AssociativeRecall, q_adapter: Adapter, v_adapter: Adapter, rng: &mut Rng) -> Result<Self> {
        let d = task.key_embed.rows();
        let std = 1.0 / (d as f64).sqrt();
        let wq = Matrix::gaussian(d, d, std, rng);
        let wk = Matrix::gaussian(d, d, std, rng);
        let wv = Matrix::gaussian(d, d, std, rng);
        let wo = Matrix::gaussian(d, d, std, rng);
        Ok(AttentionModel {
            query: AdaptedLinear::new(wq, q_adapter)?,
            key: wk,
            value: AdaptedLinear::new(wv, v_adapter)?,
            output: wo,
            readout: task.value_embed.transpose(),
            seq_len: task.seq_len,
        })
    }

    fn dim_scale(&self) -> f64 {
        1.0 / (self.key.rows() as f64).sqrt()
    }

    fn attend(&self, q: Matrix, keys: Matrix, values: Matrix) -> Result<(Matrix, Vec<Matrix>, Matrix, Matrix, Matrix)> {
        let (d, len) = (self.key.rows(), self.seq_len);
        let count = q.cols();
        let mut context = Matrix::zeros(d, count);
        let mut probs = Vec::with_capacity(count);
        for b in 0..count {
            let k_b = keys.col_block(b * len, (b + 1) * len);
            let v_b = values.col_block(b * len, (b + 1) * len);
            let q_b = q.col_block(b, b + 1);
            let p = softmax_columns(&k_b.t_matmul(&q_b)?.scale(self.dim_scale()));
            context.set_block(0, b, &v_b.matmul(&p)?);
            probs.push(p);
        }
        let logits = self.readout.matmul(&self.output.matmul(&context)?)?;
        Ok((logits, probs, keys, values, q))
    }

    pub fn logits(&self, batch: &RecallBatch) -> Result<Matrix> {
        let q = self.query.forward(&batch.queries)?;
        let keys = self.key.matmul(&batch.tokens)?;
        let values = self.value.forward(&batch.tokens)?;
        Ok(self.attend(q, keys, values)?.0)
    }

    pub fn loss(&self, batch: &RecallBatch) -> Result<f64> {
        Ok(cross_entropy_loss(&self.logits(batch)?, &batch.labels)?.0)
    }

    pub fn accuracy(&self, batch: &RecallBatch) -> Result<f64> {
        Ok(accuracy(&self.logits(batch)?, &batch.labels))
    }

    fn forward_train(&self, batch: &RecallBatch, rng: &mut Rng) -> Result<(Matrix, AttentionCache)> {
        let (q, q_cache) = self.query.forward_train(&batch.queries, rng)?;
        let keys = self.key.matmul(&batch.tokens)?;
        let (values, v_cache) = self.value.forward_train(&batch.tokens, rng)?;
        let (logits, probs, keys, values, queries) = self.attend(q, keys, values)?;
        Ok((
            logits,
            AttentionCache {
                q_cache,
                v_cache,
                keys,
                values,
                queries,
                probs,
            },
        ))
    }

    /// Cross-entropy loss and gradients for `[query adapter params.., value adapter params..]`.
    pub fn loss_and_grads(&mut self, batch: &RecallBatch, rng: &mut Rng) -> Result<(f64, Vec<Matrix>)> {
        let (logits, cache) = self.forward_train(batch, rng)?;
        let (loss, d_logits) = cross_entropy_loss(&logits, &batch.labels)?;
        let d_context = self.output.t_matmul(&self.readout.t_matmul(&d_logits)?)?;

        let (d, len) = (self.key.rows(), self.seq_len);
        let count = batch.labels.len();
        let mut d_values = Matrix::zeros(d, count * len);
        let mut d_q = Matrix::zeros(d, count);
        for b in 0..count {
            let p = &cache.probs[b];
            let dc = d_context.col_block(b, b + 1);
            let v_b = cache.values.col_block(b * len, (b + 1) * len);
            let k_b = cache.keys.col_block(b * len, (b + 1) * len);
            d_values.set_block(0, b * len, &dc.matmul_t(p)?);
            let dp = v_b.t_matmul(&dc)?;
            let mean: f64 = p.as_slice().iter().zip(dp.as_slice()).map(|(a, g)| a * g).sum();
            let ds = p.hadamard(&dp.map(|g| g - mean))?;
            d_q.set_block(0, b, &k_b.matmul(&ds)?.scale(self.dim_scale()));
        }
        debug_assert_eq!(cache.queries.shape(), d_q.shape());

        self.query.backward_cached(&batch.queries, &cache.q_cache, &d_q)?;
        self.value.backward_cached(&batch.tokens, &cache.v_cache, &d_values)?;
        let grads = self.query.grads().iter().chain(self.value.grads()).cloned().collect();
        Ok((loss, grads))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.query.params_mut();
        p.extend(self.value.params_mut());
        p
    }
}

struct RecallObjective<'a> {
    model: &'a mut AttentionModel,
    task: &'a AssociativeRecall,
    batch: usize,
    data_rng: Rng,
}

impl Objective for RecallObjective<'_> {
    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.model.params_mut()
    }

    fn loss_and_grads(&mut self, _step: usize, rng: &mut Rng) -> Result<(f64, Vec<Matrix>)> {
        let batch = self.task.sample(self.batch, &mut self.data_rng);
        self.model.loss_and_grads(&batch, rng)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionReport {
    pub train: TrainReport,
    pub baseline_accuracy: f64,
    pub test_accuracy: f64,
    pub q_profile: RankProfile,
    pub v_profile: RankProfile,
    /// Trainable parameters of both adapters together.
    pub params: u64,
    /// Equivalent rank of each adapter.
    pub equivalent_rank: usize,
    pub q_adapter: Adapter,
    pub v_adapter: Adapter,
}

/// Builds the frozen model and task from `run.task.data_seed`, attaches
/// fresh adapters to the query and value projections and trains them.
pub fn run_attention(run: &RunConfig) -> Result<AttentionReport> {
    let task_spec: &Task = &run.task;
    if task_spec.kind != TaskKind::Attention {
        return Err(Error::Config(format!("run_attention given a {} task", task_spec.kind)));
    }
    task_spec.validate()?;
    let d = task_spec.d;
    let mut data_rng = crate::seeded_rng(task_spec.data_seed);
    let task = AssociativeRecall::new(d, task_spec.vocab, task_spec.seq_len, &mut data_rng);
    let n = if run.mode == AdapterMode::Lora { 1 } else { run.n };
    let opts = run.init_options();
    let q_adapter = Adapter::init(run.mode, d, d, n, run.r_mini, &opts, run.seed)?;
    let v_adapter = Adapter::init(run.mode, d, d, n, run.r_mini, &opts, run.seed.wrapping_add(1))?;
    let mut model = AttentionModel::new(&task, q_adapter, v_adapter, &mut data_rng)?;
    let test = task.sample(task_spec.test_size, &mut data_rng);
    let baseline_accuracy = model.accuracy(&test)?;

    let stream = crate::seeded_rng(task_spec.data_seed ^ run.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let report = train_objective(
        &mut RecallObjective {
            model: &mut model,
            task: &task,
            batch: run.batch,
            data_rng: stream,
        },
        &run.train_config(),
    )?;

    let q_adapter = model.query.adapter().clone();
    let v_adapter = model.value.adapter().clone();
    Ok(AttentionReport {
        baseline_accuracy,
        test_accuracy: model.accuracy(&test)?,
        q_profile: rank_profile(&q_adapter, run.threshold, true)?,
        v_profile: rank_profile(&v_adapter, run.threshold, true)?,
        params: q_adapter.param_count() + v_adapter.param_count(),
        equivalent_rank: q_adapter.equivalent_rank(),
        q_adapter,
        v_adapter,
        train: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::InitOptions;
    use crate::harness::config::ExperimentConfig;
    use crate::train::{gradient_close, FD_STEP};

    fn small_model(mode: AdapterMode, n: usize, seed: u64) -> (AttentionModel, RecallBatch) {
        let mut rng = crate::seeded_rng(seed);
        let task = AssociativeRecall::new(8, 4, 3, &mut rng);
        let opts = InitOptions::with_alpha(2.0);
        let mut q = Adapter::init(mode, 8, 8, n, 2, &opts, seed).unwrap();
        let mut v = Adapter::init(mode, 8, 8, n, 2, &opts, seed + 1).unwrap();
        q.randomize_b(0.5, seed + 2);
        v.randomize_b(0.5, seed + 3);
        let model = AttentionModel::new(&task, q, v, &mut rng).unwrap();
        let batch = task.sample(3, &mut rng);
        (model, batch)
    }

    #[test]
    fn sampled_sequences_are_well_formed() {
        let mut rng = crate::seeded_rng(0);
        let task = AssociativeRecall::new(16, 16, 8, &mut rng);
        let batch = task.sample(5, &mut rng);
        assert_eq!(batch.tokens.shape(), (16, 40));
        assert_eq!(batch.queries.shape(), (16, 5));
        assert!(batch.labels.iter().all(|l| *l < 16));
        for b in 0..5 {
            assert_eq!(
                batch.tokens.col_block(b * 8 + 7, b * 8 + 8),
                batch.queries.col_block(b, b + 1)
            );
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for (mode, n) in [(AdapterMode::Lora, 1), (AdapterMode::Melora, 2)] {
            let (mut model, batch) = small_model(mode, n, 5);
            let (_, grads) = model.loss_and_grads(&batch, &mut crate::seeded_rng(0)).unwrap();
            for (k, g) in grads.iter().enumerate() {
                for idx in 0..g.as_slice().len() {
                    let mut plus = model.clone();
                    plus.params_mut()[k].as_mut_slice()[idx] += FD_STEP;
                    let mut minus = model.clone();
                    minus.params_mut()[k].as_mut_slice()[idx] -= FD_STEP;
                    let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * FD_STEP);
                    let an = g.as_slice()[idx];
                    let diff = (fd - an).abs();
                    assert!(
                        diff <= 1e-9 || diff / fd.abs().max(an.abs()) < 1e-5,
                        "{mode} tensor {k}[{idx}]: fd {fd} analytic {an}"
                    );
                    assert!(gradient_close(an, fd) || diff / fd.abs().max(an.abs()) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_steps_keep_the_frozen_baseline() {
        let mut c = ExperimentConfig::default();
        c.task.kind = TaskKind::Attention;
        c.task.d = 16;
        c.task.test_size = 64;
        c.steps = 0;
        let lora = run_attention(
            &ExperimentConfig {
                mode: AdapterMode::Lora,
                ..c.clone()
            }
            .run(1, 4, 1),
        )
        .unwrap();
        let melora = run_attention(&c.run(2, 2, 1)).unwrap();
        assert_eq!(lora.test_accuracy, lora.baseline_accuracy);
        assert_eq!(lora.baseline_accuracy, melora.baseline_accuracy);
    }

    #[test]
    fn equal_rank_adapters_differ_in_parameter_count() {
        let mut c = ExperimentConfig::default();
        c.task.kind = TaskKind::Attention;
        c.task.d = 32;
        c.task.test_size = 16;
        c.steps = 0;
        let melora = run_attention(&c.run(2, 4, 1)).unwrap();
        let lora = run_attention(
            &ExperimentConfig {
                mode: AdapterMode::Lora,
                ..c
            }
            .run(1, 8, 1),
        )
        .unwrap();
        assert_eq!(melora.equivalent_rank, 8);
        assert_eq!(lora.equivalent_rank, 8);
        assert_eq!(lora.params, 2 * melora.params);
    }
}
