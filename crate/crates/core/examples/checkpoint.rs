//! Saving, loading and merging an adapter.
//!
//! cargo run --example checkpoint

use melora::adapters::{load_checkpoint, save_checkpoint, InitOptions};
use melora::{Adapter, AdapterMode, Matrix};

fn main() -> melora::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("adapter.melr");
    let mut ad = Adapter::init(AdapterMode::Melora, 64, 64, 8, 1, &InitOptions::default(), 3)?;
    ad.randomize_b(0.1, 4);
    save_checkpoint(&ad, &path)?;
    let size = std::fs::metadata(&path)?.len();
    let back = load_checkpoint(&path)?;
    println!("wrote {size} bytes; reloaded adapter identical: {}", back == ad);

    let w = Matrix::gaussian(64, 64, 0.125, &mut melora::seeded_rng(1));
    let x = Matrix::gaussian(64, 2, 1.0, &mut melora::seeded_rng(2));
    let merged = back.merge(&w)?;
    let gap = merged.matmul(&x)?.sub(&back.forward(&w, &x)?)?.max_abs();
    println!("merged weight reproduces the adapted forward to {gap:.1e}");
    Ok(())
}
