//! Teacher-student recovery: a rank-4 block-diagonal teacher on d = 64 is
//! recovered exactly once the equivalent rank reaches 4, and stays at the
//! Eckart-Young floor below that.
//!
//! cargo run --release --example recovery

use melora::harness::{run_recovery, ExperimentConfig};

fn main() -> melora::Result<()> {
    let mut c = ExperimentConfig::default();
    c.task.d = 64;
    c.task.true_rank = 4;
    c.steps = 5000;
    c.warmup = 250;
    println!("teacher: rank {} block-diagonal, d = {}", c.task.true_rank, c.task.d);
    for (n, r_mini) in [(1, 1), (2, 1), (4, 1), (8, 1)] {
        let r = run_recovery(&c.run(n, r_mini, 1))?;
        println!(
            "n={n} r_mini={r_mini} rank {:<2} params {:<4} test mse {:.3e}  floor {:.3e}  train loss {:.3e}",
            r.equivalent_rank,
            r.params,
            r.test_mse,
            r.eckart_young_floor,
            r.final_train_loss.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
