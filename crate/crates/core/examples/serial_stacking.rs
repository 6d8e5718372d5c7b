//! Summing low-rank products (serial stacking) can lose rank when the
//! factors share directions; a block-diagonal placement cannot.
//!
//! cargo run --example serial_stacking

use melora::analysis::serial_stack_rank_demo;

fn main() -> melora::Result<()> {
    println!("4 terms of rank 2 in d = 32");
    println!("overlap  shared  serial  block-diag");
    for overlap in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let demo = serial_stack_rank_demo(4, 2, 32, overlap, 42)?;
        println!(
            "{overlap:>7}  {:>6}  {:>6}  {:>10}",
            demo.shared_columns, demo.serial_rank, demo.block_diag_rank
        );
    }
    Ok(())
}
