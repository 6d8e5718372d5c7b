//! Associative recall through one softmax attention head with adapters on
//! W_Q and W_V only, comparing equal-budget MELoRA and LoRA.
//!
//! cargo run --release --example attention_qv

use melora::harness::{run_attention, ExperimentConfig, TaskKind};
use melora::AdapterMode;

fn main() -> melora::Result<()> {
    let mut c = ExperimentConfig::default();
    c.task.kind = TaskKind::Attention;
    c.task.d = 32;
    c.steps = 2000;
    c.lr = 1e-2;
    for (mode, n, r) in [
        (AdapterMode::Melora, 4, 2),
        (AdapterMode::Lora, 1, 2),
        (AdapterMode::Lora, 1, 8),
    ] {
        c.mode = mode;
        let rep = run_attention(&c.run(n, r, 1))?;
        println!(
            "{mode:<6} n={n} r={r}: {:>4} params, rank {}, accuracy {:.3} (frozen {:.3}), sv > 0.1: q {} v {}",
            rep.params,
            rep.equivalent_rank,
            rep.test_accuracy,
            rep.baseline_accuracy,
            rep.q_profile.count,
            rep.v_profile.count
        );
    }
    Ok(())
}
