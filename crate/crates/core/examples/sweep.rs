//! Runs the sweep described by a config file and prints the CSV.
//!
//! cargo run --release --example sweep -- crates/core/examples/configs/sweep_n.toml

use melora::harness::{run_sweep, write_sweep_csv, ExperimentConfig};

fn main() -> melora::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/sweep_n.toml").to_string());
    let config = ExperimentConfig::load(path.as_ref())?;
    let rows = run_sweep(&config)?;
    write_sweep_csv(&rows, config.record_timing, std::io::stdout().lock())
}
