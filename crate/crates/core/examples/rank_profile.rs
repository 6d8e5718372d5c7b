//! Effective rank after training at equal parameter budget: MELoRA 8x1
//! against LoRA r=1 on a dense rank-8 teacher.
//!
//! cargo run --release --example rank_profile

use melora::harness::{run_recovery, ExperimentConfig, TeacherKind};
use melora::AdapterMode;

fn main() -> melora::Result<()> {
    let mut c = ExperimentConfig::default();
    c.task.d = 64;
    c.task.true_rank = 8;
    c.task.teacher = TeacherKind::Dense;
    for seed in 1..=5 {
        c.mode = AdapterMode::Melora;
        let mel = run_recovery(&c.run(8, 1, seed))?;
        c.mode = AdapterMode::Lora;
        let lora = run_recovery(&c.run(1, 1, seed))?;
        println!(
            "seed {seed}: {} params each; singular values > {}: melora {} lora {}",
            mel.params, c.threshold, mel.profile.count, lora.profile.count
        );
    }
    Ok(())
}
