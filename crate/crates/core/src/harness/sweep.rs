//! Grid runner over `(n, r_mini, seed)` with per-group summary rows.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::analysis::audit_params;
use crate::error::{Error, Result};
use crate::harness::attention::run_attention;
use crate::harness::config::{ExperimentConfig, RunConfig, TaskKind};
use crate::harness::tasks::{run_classify, run_recovery};

pub const SWEEP_CSV_HEADER: [&str; 12] = [
    "task",
    "mode",
    "n",
    "r_mini",
    "alpha",
    "seed",
    "params",
    "equiv_rank",
    "steps",
    "final_metric",
    "sv_count",
    "wall_ms",
];

/// What one run contributes to the sweep table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    /// Test MSE for recovery, test accuracy for classification and attention.
    pub final_metric: f64,
    /// Singular values above threshold; summed over both adapters for attention.
    pub sv_count: usize,
    pub params: u64,
    pub equivalent_rank: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub run: RunConfig,
    /// Failures are kept as their message so the sweep can continue.
    pub outcome: std::result::Result<RunOutcome, String>,
    pub wall_ms: f64,
}

/// Runs one configuration of any task kind.
pub fn run_one(run: &RunConfig) -> Result<RunOutcome> {
    let outcome = match run.task.kind {
        TaskKind::Recovery => {
            let r = run_recovery(run)?;
            RunOutcome {
                final_metric: r.test_mse,
                sv_count: r.profile.count,
                params: r.params,
                equivalent_rank: r.equivalent_rank,
            }
        }
        TaskKind::Classify => {
            let r = run_classify(run)?;
            RunOutcome {
                final_metric: r.test_accuracy,
                sv_count: r.profile.count,
                params: r.params,
                equivalent_rank: r.equivalent_rank,
            }
        }
        TaskKind::Attention => {
            let r = run_attention(run)?;
            RunOutcome {
                final_metric: r.test_accuracy,
                sv_count: r.q_profile.count + r.v_profile.count,
                params: r.params,
                equivalent_rank: r.equivalent_rank,
            }
        }
    };
    let n = if run.mode == crate::AdapterMode::Lora { 1 } else { run.n };
    let audited = audit_params(&run.task.model_shape(), run.mode, n, run.r_mini)?;
    if audited != outcome.params {
        return Err(Error::InvalidArgument(format!(
            "parameter accounting mismatch: run reports {} but audit gives {audited}",
            outcome.params
        )));
    }
    Ok(outcome)
}

/// Runs every combination, in parallel when `threads != 1`, and returns the
/// rows in canonical `(n, r_mini, seed)` order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let runs = config.runs();
    let work = || -> Vec<SweepRow> {
        runs.par_iter()
            .map(|run| {
                let start = Instant::now();
                let outcome = run_one(run).map_err(|e| e.to_string());
                SweepRow {
                    run: run.clone(),
                    outcome,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                }
            })
            .collect()
    };
    if config.threads == 0 {
        Ok(work())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(work))
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per run, then `mean` and `std` (sample) rows per `(n, r_mini)`
/// over the successful seeds. `wall_ms` stays empty unless `record_timing`
/// is set, so identical configs give byte-identical files.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], record_timing: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    let timing = |ms: f64| {
        if record_timing {
            format!("{ms:.3}")
        } else {
            String::new()
        }
    };
    for row in rows {
        let r = &row.run;
        let (params, rank, metric, sv) = match &row.outcome {
            Ok(o) => (
                o.params.to_string(),
                o.equivalent_rank.to_string(),
                crate::format_f64(o.final_metric),
                o.sv_count.to_string(),
            ),
            Err(_) => (String::new(), String::new(), "error".to_string(), String::new()),
        };
        w.write_record([
            r.task.kind.to_string(),
            r.mode.to_string(),
            r.n.to_string(),
            r.r_mini.to_string(),
            r.alpha.to_string(),
            r.seed.to_string(),
            params,
            rank,
            r.steps.to_string(),
            metric,
            sv,
            timing(row.wall_ms),
        ])?;
    }

    let mut start = 0;
    while start < rows.len() {
        let key = (rows[start].run.n, rows[start].run.r_mini);
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| (r.run.n, r.run.r_mini) == key)
                .count();
        let group = &rows[start..end];
        let ok: Vec<&RunOutcome> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        if !ok.is_empty() {
            let r = &group[0].run;
            let metrics: Vec<f64> = ok.iter().map(|o| o.final_metric).collect();
            let svs: Vec<f64> = ok.iter().map(|o| o.sv_count as f64).collect();
            let walls: Vec<f64> = group.iter().filter(|g| g.outcome.is_ok()).map(|g| g.wall_ms).collect();
            let (m_mean, m_std) = mean_std(&metrics);
            let (s_mean, s_std) = mean_std(&svs);
            let (w_mean, w_std) = mean_std(&walls);
            for (label, metric, sv, wall) in [("mean", m_mean, s_mean, w_mean), ("std", m_std, s_std, w_std)] {
                w.write_record([
                    r.task.kind.to_string(),
                    r.mode.to_string(),
                    r.n.to_string(),
                    r.r_mini.to_string(),
                    r.alpha.to_string(),
                    label.to_string(),
                    ok[0].params.to_string(),
                    ok[0].equivalent_rank.to_string(),
                    r.steps.to_string(),
                    crate::format_f64(metric),
                    crate::format_f64(sv),
                    timing(wall),
                ])?;
            }
        }
        start = end;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::AdapterMode;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.task.d = 16;
        c.task.true_rank = 2;
        c.task.test_size = 32;
        c.steps = 20;
        c.warmup = 2;
        c.n = vec![4, 1, 2];
        c.r_mini = vec![1];
        c.seeds = vec![2, 1];
        c
    }

    fn csv_of(c: &ExperimentConfig) -> String {
        let rows = run_sweep(c).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, c.record_timing, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn rows_are_canonical_and_params_constant_across_n() {
        let rows = run_sweep(&small()).unwrap();
        let keys: Vec<(usize, u64)> = rows.iter().map(|r| (r.run.n, r.run.seed)).collect();
        assert_eq!(keys, vec![(1, 1), (1, 2), (2, 1), (2, 2), (4, 1), (4, 2)]);
        let params: Vec<u64> = rows.iter().map(|r| r.outcome.as_ref().unwrap().params).collect();
        assert!(params.iter().all(|p| *p == 32));
    }

    #[test]
    fn output_is_byte_identical_across_runs_and_thread_counts() {
        let mut c = small();
        let a = csv_of(&c);
        c.threads = 1;
        assert_eq!(a, csv_of(&c));
        assert_eq!(a.lines().count(), 1 + 6 + 6);
        assert!(a.lines().nth(7).unwrap().contains(",mean,"));
    }

    #[test]
    fn melora_n1_rows_match_lora_bitwise() {
        let mut c = small();
        c.n = vec![1];
        let melora = run_sweep(&c).unwrap();
        c.mode = AdapterMode::Lora;
        let lora = run_sweep(&c).unwrap();
        for (m, l) in melora.iter().zip(&lora) {
            let (m, l) = (m.outcome.as_ref().unwrap(), l.outcome.as_ref().unwrap());
            assert_eq!(m.final_metric.to_bits(), l.final_metric.to_bits());
        }
    }

    #[test]
    fn failed_runs_are_recorded_and_the_sweep_continues() {
        let mut c = small();
        c.n = vec![3, 4];
        let rows = run_sweep(&c).unwrap();
        assert!(rows.iter().filter(|r| r.run.n == 3).all(|r| r.outcome.is_err()));
        assert!(rows.iter().filter(|r| r.run.n == 4).all(|r| r.outcome.is_ok()));
        let mut buf = Vec::new();
        write_sweep_csv(&rows, false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(",error,"));
    }

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.290_994_448_735_805_6).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
