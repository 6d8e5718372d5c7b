//! Argument parsing and dispatch for the `melora` binary.
//!
//! Machine-readable output (CSV) goes to `--out` when given, written
//! atomically, and to stdout otherwise; human-readable notes go to stderr.
//! Exit codes: 0 success, 1 failed verification or training, 2 usage error,
//! 3 I/O or file-format error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapters::{load_checkpoint, save_checkpoint, AdapterMode};
use crate::analysis::{
    audit_rows, format_count, rank_profile, serial_stack_rank_demo, write_analysis_csv, AnalysisRow, ModelShape,
    DEFAULT_SV_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::harness::{
    run_attention, run_classify, run_recovery, run_sweep, write_sweep_csv, ExperimentConfig, TaskKind, TeacherKind,
};
use crate::verify::{run_all, write_verify_csv, Sabotage, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "melora",
    version,
    about = "Mini-ensemble low-rank adapters: audits, rank analysis and desk-scale experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random draw the command makes
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output file, replaced atomically (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite; exits 1 naming any failing check
    Verify(VerifyArgs),
    /// Count trainable adapter parameters for a model shape
    CountParams(CountParamsArgs),
    /// Singular-value profile of a saved adapter
    AnalyzeRank(AnalyzeRankArgs),
    /// Rank of summed low-rank products versus a block-diagonal placement
    DemoRank(DemoRankArgs),
    /// Train one adapter on a synthetic task
    Train(TrainArgs),
    /// Run a grid of (n, r_mini, seed) experiments from a config file
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run only checks whose name contains this text
    #[arg(long)]
    pub filter: Option<String>,
    /// Break one computation on purpose: rank-additivity, form-equivalence or gradient
    #[arg(long)]
    pub sabotage: Option<Sabotage>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CountParamsArgs {
    /// Built-in model shape (roberta-base-qv, llama2-7b-qv)
    #[arg(long, conflicts_with_all = ["d", "layers", "matrices"])]
    pub preset: Option<String>,
    /// Hidden size of a custom uniform shape
    #[arg(long, requires = "layers")]
    pub d: Option<usize>,
    /// Layer count of a custom shape
    #[arg(long, requires = "d")]
    pub layers: Option<usize>,
    /// Adapted square matrices per layer, comma separated
    #[arg(long, value_delimiter = ',', default_value = "q,v")]
    pub matrices: Vec<String>,
    #[arg(long, default_value_t = AdapterMode::Melora)]
    pub mode: AdapterMode,
    /// Number of minis (1 for lora)
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Rank of each mini (the LoRA rank when --mode lora)
    #[arg(long)]
    pub r: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AnalyzeRankArgs {
    /// MELR checkpoint to analyse
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Singular values strictly above this count towards the rank
    #[arg(long, default_value_t = DEFAULT_SV_THRESHOLD)]
    pub threshold: f64,
    /// Analyse B·A without the alpha/r scale
    #[arg(long)]
    pub unscaled: bool,
    /// Emit every singular value instead of the one-row summary
    #[arg(long)]
    pub spectrum: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DemoRankArgs {
    /// Number of summed (or block-diagonal) terms
    #[arg(long, default_value_t = 4)]
    pub num_stacked: usize,
    /// Rank of each term
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Fractions of columns shared between consecutive terms
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub overlap: Vec<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config; flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// recovery, classify or attention [default: recovery]
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// lora or melora [default: melora]
    #[arg(long)]
    pub mode: Option<AdapterMode>,
    /// Number of minis [default: 4]
    #[arg(long)]
    pub n: Option<usize>,
    /// Rank of each mini [default: 1]
    #[arg(long)]
    pub r: Option<usize>,
    /// Feature dimension [default: 64]
    #[arg(long)]
    pub d: Option<usize>,
    /// Teacher rank k [default: 4]
    #[arg(long)]
    pub true_rank: Option<usize>,
    /// block or dense [default: block]
    #[arg(long)]
    pub teacher: Option<TeacherKind>,
    /// [default: 3000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate [default: 0.005]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup steps [default: 100]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Decoupled weight decay [default: 0]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Save the trained adapter (the query adapter for attention)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Attention only: save the value adapter
    #[arg(long)]
    pub checkpoint_v: Option<PathBuf>,
    /// Fill the wall_ms column of the report
    #[arg(long)]
    pub record_timing: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment config with lists for n, r_mini and seeds
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (0 = one per core)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Fill the wall_ms column (makes output run-dependent)
    #[arg(long)]
    pub record_timing: bool,
    #[command(flatten)]
    pub common: Common,
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_io_or_format() => EXIT_IO,
        Error::Diverged { .. } | Error::SvdNotConverged { .. } | Error::NonFinite(_) => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

struct Io<'a> {
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Io<'_> {
    fn emit(&mut self, out: Option<&Path>, bytes: &[u8]) -> Result<()> {
        match out {
            Some(path) => write_atomic(path, bytes),
            None => Ok(self.stdout.write_all(bytes)?),
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return e.exit_code();
        }
    };
    let mut io = Io { stdout, stderr };
    match dispatch(cli.command, &mut io) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, io: &mut Io) -> Result<i32> {
    match command {
        Command::Verify(a) => cmd_verify(a, io),
        Command::CountParams(a) => cmd_count_params(a, io),
        Command::AnalyzeRank(a) => cmd_analyze_rank(a, io),
        Command::DemoRank(a) => cmd_demo_rank(a, io),
        Command::Train(a) => cmd_train(a, io),
        Command::Sweep(a) => cmd_sweep(a, io),
    }
}

fn cmd_verify(a: VerifyArgs, io: &mut Io) -> Result<i32> {
    let outcomes = run_all(&VerifyOptions {
        filter: a.filter,
        sabotage: a.sabotage,
        seed: a.common.seed,
    })?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    for o in &outcomes {
        writeln!(
            io.stderr,
            "{} {:<22} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        )?;
    }
    writeln!(
        io.stderr,
        "{} of {} checks passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    )?;
    let mut buf = Vec::new();
    write_verify_csv(&outcomes, &mut buf)?;
    io.emit(a.common.out.as_deref(), &buf)?;
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        writeln!(io.stderr, "failing checks: {}", failed.join(", "))?;
        Ok(EXIT_FAILURE)
    }
}

fn cmd_count_params(a: CountParamsArgs, io: &mut Io) -> Result<i32> {
    let shape = match (&a.preset, a.d, a.layers) {
        (Some(name), _, _) => ModelShape::preset(name)?,
        (None, Some(d), Some(layers)) => {
            let names: Vec<&str> = a.matrices.iter().map(String::as_str).collect();
            ModelShape::uniform(d, layers, &names)?
        }
        _ => return Err(Error::InvalidArgument("give --preset or both --d and --layers".into())),
    };
    let rows = audit_rows(&shape, a.mode, a.n, a.r)?;
    let total: u64 = rows.iter().map(|r| r.params).sum();
    match &a.common.out {
        Some(path) => {
            let mut buf = Vec::new();
            write_analysis_csv(&rows, &mut buf)?;
            write_atomic(path, &buf)?;
            writeln!(io.stdout, "{}", format_count(total))?;
        }
        None => writeln!(io.stdout, "{}", format_count(total))?,
    }
    Ok(EXIT_OK)
}

fn cmd_analyze_rank(a: AnalyzeRankArgs, io: &mut Io) -> Result<i32> {
    let adapter = load_checkpoint(&a.checkpoint)?;
    let profile = rank_profile(&adapter, a.threshold, !a.unscaled)?;
    let mut buf = Vec::new();
    if a.spectrum {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["index", "singular_value", "above_threshold"])?;
        for (i, s) in profile.singular_values.iter().enumerate() {
            w.write_record([i.to_string(), s.to_string(), (*s > a.threshold).to_string()])?;
        }
        w.flush()?;
    } else {
        let name = a
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        write_analysis_csv(&[AnalysisRow::for_adapter(&name, &adapter, Some(&profile))], &mut buf)?;
    }
    writeln!(
        io.stderr,
        "{} n={} r_mini={}: {} of {} singular values above {} (equivalent rank {})",
        adapter.mode(),
        adapter.n(),
        adapter.r_mini(),
        profile.count,
        profile.singular_values.len(),
        a.threshold,
        profile.equivalent_rank
    )?;
    io.emit(a.common.out.as_deref(), &buf)?;
    Ok(EXIT_OK)
}

fn cmd_demo_rank(a: DemoRankArgs, io: &mut Io) -> Result<i32> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["overlap", "shared_columns", "serial_rank", "block_diag_rank"])?;
        for &overlap in &a.overlap {
            let demo = serial_stack_rank_demo(a.num_stacked, a.r, a.d, overlap, a.common.seed)?;
            w.write_record([
                overlap.to_string(),
                demo.shared_columns.to_string(),
                demo.serial_rank.to_string(),
                demo.block_diag_rank.to_string(),
            ])?;
        }
        w.flush()?;
    }
    io.emit(a.common.out.as_deref(), &buf)?;
    Ok(EXIT_OK)
}

fn train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.task {
        c.task.kind = v;
    }
    if let Some(v) = a.mode {
        c.mode = v;
        if v == AdapterMode::Lora && a.n.is_none() {
            c.n = vec![1];
        }
    }
    if let Some(v) = a.n {
        c.n = vec![v];
    }
    if let Some(v) = a.r {
        c.r_mini = vec![v];
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),*) => { $( if let Some(v) = a.$flag { c.$($field).+ = v; } )* };
    }
    set!(d => task.d, true_rank => task.true_rank, teacher => task.teacher, steps => steps, lr => lr,
         warmup => warmup, weight_decay => weight_decay, batch => batch, alpha => alpha);
    if c.steps > 0 && c.warmup >= c.steps && a.warmup.is_none() {
        c.warmup = c.steps / 10;
    }
    c.seeds = vec![a.common.seed];
    c.validate()?;
    if c.n.len() != 1 || c.r_mini.len() != 1 {
        return Err(Error::InvalidArgument(
            "train runs one configuration: give a single n and r_mini (use sweep for lists)".into(),
        ));
    }
    Ok(c)
}

fn cmd_train(a: TrainArgs, io: &mut Io) -> Result<i32> {
    let c = train_config(&a)?;
    let run = c.run(c.n[0], c.r_mini[0], a.common.seed);
    let (report, summary, primary, secondary) = match c.task.kind {
        TaskKind::Recovery => {
            let r = run_recovery(&run)?;
            let summary = format!(
                "test mse {:.6e} (initial {:.6e}, rank-{} floor {:.6e}); {} params; {} singular values above {}",
                r.test_mse,
                r.initial_test_mse,
                r.equivalent_rank,
                r.eckart_young_floor,
                r.params,
                r.profile.count,
                run.threshold
            );
            (r.train, summary, r.adapter, None)
        }
        TaskKind::Classify => {
            let r = run_classify(&run)?;
            let summary = format!(
                "test accuracy {:.4} (frozen baseline {:.4}); {} params; {} singular values above {}",
                r.test_accuracy, r.baseline_accuracy, r.params, r.profile.count, run.threshold
            );
            (r.train, summary, r.adapter, None)
        }
        TaskKind::Attention => {
            let r = run_attention(&run)?;
            let summary = format!(
                "test accuracy {:.4} (frozen baseline {:.4}); {} params over W_Q and W_V; singular values above {}: q {}, v {}",
                r.test_accuracy, r.baseline_accuracy, r.params, run.threshold, r.q_profile.count, r.v_profile.count
            );
            (r.train, summary, r.q_adapter, Some(r.v_adapter))
        }
    };
    writeln!(
        io.stderr,
        "{} {} n={} r_mini={} seed={}: {summary}",
        c.task.kind, run.mode, run.n, run.r_mini, run.seed
    )?;
    if let Some(path) = &a.checkpoint {
        save_checkpoint(&primary, path)?;
    }
    match (&a.checkpoint_v, secondary) {
        (Some(path), Some(v)) => save_checkpoint(&v, path)?,
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "--checkpoint-v only applies to the attention task".into(),
            ))
        }
        _ => {}
    }
    let mut buf = Vec::new();
    report.write_csv(a.record_timing, &mut buf)?;
    io.emit(a.common.out.as_deref(), &buf)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(a: SweepArgs, io: &mut Io) -> Result<i32> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut c = ExperimentConfig::from_toml_str(&text)?;
    // the config's seed list wins; --seed stands in when the file has none
    let has_seeds = text
        .parse::<toml::Table>()
        .map(|t| t.contains_key("seeds"))
        .unwrap_or(false);
    if !has_seeds {
        c.seeds = vec![a.common.seed];
    }
    if let Some(t) = a.threads {
        c.threads = t;
    }
    c.record_timing |= a.record_timing;
    let rows = run_sweep(&c)?;
    let failures = rows.iter().filter(|r| r.outcome.is_err()).count();
    for row in rows.iter().filter(|r| r.outcome.is_err()) {
        if let Err(msg) = &row.outcome {
            writeln!(
                io.stderr,
                "run n={} r_mini={} seed={} failed: {msg}",
                row.run.n, row.run.r_mini, row.run.seed
            )?;
        }
    }
    writeln!(io.stderr, "{} runs, {failures} failed", rows.len())?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, c.record_timing, &mut buf)?;
    let out = a.common.out.clone().or(c.output.clone());
    io.emit(out.as_deref(), &buf)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("melora").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn count_params_prints_exact_and_rounded() {
        let (code, out, _) = run_args(&[
            "count-params",
            "--preset",
            "roberta-base-qv",
            "--mode",
            "lora",
            "--r",
            "8",
        ]);
        assert_eq!(code, 0);
        assert_eq!(out, "294912 (~295k)\n");
        let (code, out, _) = run_args(&[
            "count-params",
            "--d",
            "64",
            "--layers",
            "2",
            "--mode",
            "melora",
            "--n",
            "4",
            "--r",
            "1",
        ]);
        assert_eq!(code, 0);
        assert_eq!(out, "512 (~512)\n");
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(
            run_args(&["count-params", "--preset", "roberta-base-qv", "--r", "1", "--bogus"]).0,
            2
        );
        assert_eq!(
            run_args(&["count-params", "--preset", "roberta-base-qv", "--n", "5", "--r", "1"]).0,
            2
        );
        assert_eq!(run_args(&["count-params", "--preset", "nope", "--r", "1"]).0, 2);
        assert_eq!(run_args(&[]).0, 2);
    }

    #[test]
    fn help_exits_0_and_lists_defaults() {
        let (code, out, _) = run_args(&["analyze-rank", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("--threshold") && out.contains("[default: 0.1]"));
        assert!(out.contains("--seed") && out.contains("[default: 42]"));
    }

    #[test]
    fn io_errors_exit_3() {
        let (code, _, err) = run_args(&["analyze-rank", "--checkpoint", "/nonexistent/x.melr"]);
        assert_eq!(code, 3, "{err}");
    }

    #[test]
    fn demo_rank_csv() {
        let (code, out, _) = run_args(&["demo-rank", "--overlap", "0,1"]);
        assert_eq!(code, 0);
        assert_eq!(
            out,
            "overlap,shared_columns,serial_rank,block_diag_rank\n0,0,8,8\n1,2,2,8\n"
        );
    }
}
