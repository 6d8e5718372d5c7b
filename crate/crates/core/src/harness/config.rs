//! Experiment configuration.
//!
//! Configs are flat TOML: scalar keys plus lists for the swept axes
//! (`n`, `r_mini`, `seeds`). Unknown keys are rejected. Example:
//!
//! ```toml
//! task = "recovery"
//! mode = "melora"
//! n = [1, 2, 4, 8]
//! r_mini = [2]
//! seeds = [1, 2, 3, 4, 5]
//! d = 64
//! true_rank = 4
//! teacher = "block"
//! steps = 3000
//! lr = 0.01
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::adapters::{AdapterMode, InitOptions};
use crate::analysis::ModelShape;
use crate::error::{Error, Result};
use crate::train::{AdamWConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Regress onto a teacher `W₀ + U Vᵀ` of known rank.
    Recovery,
    /// Classify Gaussian inputs labelled by a perturbed teacher.
    Classify,
    /// Associative recall through one softmax attention head.
    Attention,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Recovery => "recovery",
            TaskKind::Classify => "classify",
            TaskKind::Attention => "attention",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovery" => Ok(TaskKind::Recovery),
            "classify" => Ok(TaskKind::Classify),
            "attention" => Ok(TaskKind::Attention),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Structure of the teacher update in the recovery and classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// `block_diag` of `true_rank` rank-1 blocks; exactly representable by
    /// MELoRA whenever its blocks align with the teacher's.
    Block,
    /// Dense Gaussian `U Vᵀ` of rank `true_rank`.
    Dense,
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(TeacherKind::Block),
            "dense" => Ok(TeacherKind::Dense),
            other => Err(Error::Config(format!("unknown teacher {other:?}"))),
        }
    }
}

/// Task definition shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    /// Input width (and output width for recovery and attention).
    pub d: usize,
    pub true_rank: usize,
    pub teacher: TeacherKind,
    /// Multiplies the teacher update.
    pub teacher_scale: f64,
    pub classes: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Seeds the frozen weights, the teacher and the test set.
    pub data_seed: u64,
    pub test_size: usize,
}

impl Default for Task {
    fn default() -> Self {
        Task {
            kind: TaskKind::Recovery,
            d: 64,
            true_rank: 4,
            teacher: TeacherKind::Block,
            teacher_scale: 1.0,
            classes: 8,
            vocab: 16,
            seq_len: 8,
            data_seed: 7,
            test_size: 256,
        }
    }
}

impl Task {
    /// Output width of the adapted matrix (recovery and classification).
    pub fn d_out(&self) -> usize {
        match self.kind {
            TaskKind::Classify => self.classes,
            _ => self.d,
        }
    }

    /// The adapted matrices of this task, for parameter audits.
    pub fn model_shape(&self) -> ModelShape {
        let matrices = match self.kind {
            TaskKind::Attention => vec![("q", self.d, self.d), ("v", self.d, self.d)],
            _ => vec![("w", self.d, self.d_out())],
        };
        ModelShape {
            name: format!("{}-d{}", self.kind, self.d),
            description: String::new(),
            hidden_dim: self.d,
            num_layers: 1,
            full_params: None,
            matrices: matrices
                .into_iter()
                .map(|(name, d_in, d_out)| crate::analysis::AdaptedMatrix {
                    name: name.into(),
                    d_in,
                    d_out,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.test_size == 0 {
            return Err(Error::Config("d and test_size must be positive".into()));
        }
        if !(self.teacher_scale >= 0.0 && self.teacher_scale.is_finite()) {
            return Err(Error::Config(format!("bad teacher_scale {}", self.teacher_scale)));
        }
        match self.kind {
            TaskKind::Recovery | TaskKind::Classify => {
                if self.true_rank > self.d.min(self.d_out()) {
                    return Err(Error::Config(format!(
                        "true_rank {} exceeds min(d, d_out) = {}",
                        self.true_rank,
                        self.d.min(self.d_out())
                    )));
                }
                if self.teacher == TeacherKind::Block
                    && self.true_rank > 0
                    && (!self.d.is_multiple_of(self.true_rank) || !self.d_out().is_multiple_of(self.true_rank))
                {
                    return Err(Error::Config(format!(
                        "block teacher needs true_rank = {} to divide d = {} and d_out = {}",
                        self.true_rank,
                        self.d,
                        self.d_out()
                    )));
                }
                if self.kind == TaskKind::Classify && self.classes < 2 {
                    return Err(Error::Config("classify needs at least 2 classes".into()));
                }
            }
            TaskKind::Attention => {
                if self.vocab < 2 || self.seq_len < 2 {
                    return Err(Error::Config(
                        "attention needs vocab >= 2 and seq_len >= 2 (one memory slot plus the query)".into(),
                    ));
                }
                if self.seq_len > self.vocab + 1 {
                    return Err(Error::Config(format!(
                        "seq_len {} needs {} distinct keys but vocab is {}",
                        self.seq_len,
                        self.seq_len - 1,
                        self.vocab
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One fully resolved training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub mode: AdapterMode,
    pub n: usize,
    pub r_mini: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub init_std: Option<f64>,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl RunConfig {
    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            alpha: self.alpha,
            dropout_p: self.dropout,
            init_std: self.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            warmup_steps: self.warmup,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            seed: self.seed ^ TRAIN_STREAM_SALT,
        }
    }
}

// Keeps dropout draws independent of the adapter initialisation stream.
pub const TRAIN_STREAM_SALT: u64 = 0x5EED_D80F;

/// A sweep over `n x r_mini x seeds`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: AdapterMode,
    pub n: Vec<usize>,
    pub r_mini: Vec<usize>,
    pub alpha: f64,
    pub dropout: f64,
    pub init_std: Option<f64>,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    /// Singular-value threshold for the `sv_count` column.
    pub threshold: f64,
    pub output: Option<PathBuf>,
    /// Fill the `wall_ms` column. Off by default so reruns are byte-identical.
    pub record_timing: bool,
    /// Worker threads for the sweep; 0 picks the rayon default.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::default(),
            mode: AdapterMode::Melora,
            n: vec![4],
            r_mini: vec![1],
            alpha: crate::adapters::DEFAULT_ALPHA,
            dropout: 0.0,
            init_std: None,
            lr: 5e-3,
            warmup: 100,
            weight_decay: 0.0,
            steps: 3000,
            batch: 32,
            seeds: vec![1, 2, 3, 4, 5],
            threshold: crate::analysis::DEFAULT_SV_THRESHOLD,
            output: None,
            record_timing: false,
            threads: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: Option<TaskKind>,
    mode: Option<AdapterMode>,
    n: Option<Vec<usize>>,
    r_mini: Option<Vec<usize>>,
    alpha: Option<f64>,
    dropout: Option<f64>,
    init_std: Option<f64>,
    lr: Option<f64>,
    warmup: Option<usize>,
    weight_decay: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    seeds: Option<Vec<u64>>,
    threshold: Option<f64>,
    output: Option<PathBuf>,
    record_timing: Option<bool>,
    threads: Option<usize>,
    d: Option<usize>,
    true_rank: Option<usize>,
    teacher: Option<TeacherKind>,
    teacher_scale: Option<f64>,
    classes: Option<usize>,
    vocab: Option<usize>,
    seq_len: Option<usize>,
    data_seed: Option<u64>,
    test_size: Option<usize>,
}

impl ExperimentConfig {
    /// Parses a flat TOML config; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = ExperimentConfig::default();
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = raw.$field { c.$field = v; } )* };
        }
        macro_rules! take_task {
            ($($field:ident),*) => { $( if let Some(v) = raw.$field { c.task.$field = v; } )* };
        }
        take!(
            mode,
            n,
            r_mini,
            alpha,
            dropout,
            lr,
            warmup,
            weight_decay,
            steps,
            batch,
            seeds,
            threshold,
            record_timing,
            threads
        );
        take_task!(
            d,
            true_rank,
            teacher,
            teacher_scale,
            classes,
            vocab,
            seq_len,
            data_seed,
            test_size
        );
        if let Some(kind) = raw.task {
            c.task.kind = kind;
        }
        c.init_std = raw.init_std;
        c.output = raw.output;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.n.is_empty() || self.r_mini.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("n, r_mini and seeds must be non-empty".into()));
        }
        if self.n.contains(&0) || self.r_mini.contains(&0) {
            return Err(Error::Config("n and r_mini entries must be positive".into()));
        }
        if self.mode == AdapterMode::Lora && self.n.iter().any(|n| *n != 1) {
            return Err(Error::Config("lora mode requires n = [1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.steps > 0 && self.warmup >= self.steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be below steps ({})",
                self.warmup, self.steps
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::Config("threshold must be positive".into()));
        }
        crate::adapters::InitOptions {
            alpha: self.alpha,
            dropout_p: self.dropout,
            init_std: self.init_std,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Every `(n, r_mini, seed)` combination in canonical (sorted) order.
    pub fn runs(&self) -> Vec<RunConfig> {
        let mut ns = self.n.clone();
        ns.sort_unstable();
        ns.dedup();
        let mut rs = self.r_mini.clone();
        rs.sort_unstable();
        rs.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = Vec::new();
        for &n in &ns {
            for &r_mini in &rs {
                for &seed in &seeds {
                    out.push(self.run(n, r_mini, seed));
                }
            }
        }
        out
    }

    pub fn run(&self, n: usize, r_mini: usize, seed: u64) -> RunConfig {
        RunConfig {
            task: self.task.clone(),
            mode: self.mode,
            n,
            r_mini,
            alpha: self.alpha,
            dropout: self.dropout,
            init_std: self.init_std,
            lr: self.lr,
            warmup: self.warmup,
            weight_decay: self.weight_decay,
            steps: self.steps,
            batch: self.batch,
            seed,
            threshold: self.threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_toml_with_defaults() {
        let c = ExperimentConfig::from_toml_str(
            r#"
            task = "classify"
            mode = "melora"
            n = [4, 2]
            r_mini = [1]
            seeds = [3, 1]
            d = 32
            classes = 8
            true_rank = 4
            teacher = "dense"
            steps = 10
            warmup = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.task.kind, TaskKind::Classify);
        assert_eq!(c.task.teacher, TeacherKind::Dense);
        assert_eq!(c.alpha, 16.0);
        let runs = c.runs();
        let order: Vec<(usize, u64)> = runs.iter().map(|r| (r.n, r.seed)).collect();
        assert_eq!(order, [(2, 1), (2, 3), (4, 1), (4, 3)]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str("colour = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("mode = \"lora\"\nn = [2]").is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml_str("steps = 10\nwarmup = 10").is_err());
        assert!(ExperimentConfig::from_toml_str("d = 64\ntrue_rank = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"translate\"").is_err());
    }

    #[test]
    fn task_shapes_for_audits() {
        let mut t = Task::default();
        assert_eq!(t.model_shape().matrices.len(), 1);
        t.kind = TaskKind::Attention;
        let names: Vec<String> = t.model_shape().matrices.into_iter().map(|m| m.name).collect();
        assert_eq!(names, ["q", "v"]);
    }
}
