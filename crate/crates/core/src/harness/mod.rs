//! Desk-scale experiments: teacher-student recovery, synthetic
//! classification, associative recall through single-head attention, and
//! the seed sweep runner that tabulates them.

mod attention;
mod config;
mod sweep;
mod tasks;

pub use attention::{run_attention, AssociativeRecall, AttentionModel, AttentionReport, RecallBatch};
pub use config::{ExperimentConfig, RunConfig, Task, TaskKind, TeacherKind, TRAIN_STREAM_SALT};
pub use sweep::{run_one, run_sweep, write_sweep_csv, RunOutcome, SweepRow, SWEEP_CSV_HEADER};
pub use tasks::{run_classify, run_recovery, teacher_update, ClassifyReport, RecoveryReport, TeacherData};
