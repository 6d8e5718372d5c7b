//! Trainable-parameter totals for the built-in model shapes.
//!
//! cargo run --example param_audit

use melora::analysis::{audit_params, format_count, presets};
use melora::AdapterMode;

fn main() -> melora::Result<()> {
    for shape in presets()? {
        println!(
            "{} ({} layers, hidden {}):",
            shape.name, shape.num_layers, shape.hidden_dim
        );
        let configs = [
            (AdapterMode::Lora, 1, 8),
            (AdapterMode::Lora, 1, 64),
            (AdapterMode::Melora, 8, 1),
            (AdapterMode::Melora, 2, 4),
            (AdapterMode::Melora, 16, 1),
        ];
        for (mode, n, r) in configs {
            let total = audit_params(&shape, mode, n, r)?;
            println!(
                "  {mode:<6} n={n:<2} r={r:<2} equivalent rank {:<3} -> {}",
                n * r,
                format_count(total)
            );
        }
    }
    Ok(())
}
