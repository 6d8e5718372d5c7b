//! The three equivalent ways to apply a MELoRA update, and the n = 1 case
//! that reduces to plain LoRA bit for bit.
//!
//! cargo run --example forward_forms

use melora::adapters::InitOptions;
use melora::{Adapter, AdapterMode, Matrix, MeloraAdapter};

fn main() -> melora::Result<()> {
    let (d, n, r_mini) = (32, 4, 2);
    let mut ad = Adapter::Melora(MeloraAdapter::init(d, d, n, r_mini, 16.0, 7)?);
    // fresh adapters have B = 0; give them something to show
    ad.randomize_b(1.0, 8);
    let Adapter::Melora(mel) = &ad else { unreachable!() };

    let x = Matrix::gaussian(d, 3, 1.0, &mut melora::seeded_rng(1));
    let concat = mel.forward_delta(&x)?;
    let sparse = mel.forward_delta_sparse(&x)?;
    let dense = mel.forward_delta_dense(&x)?;
    println!(
        "concat vs sparse expansion: max |diff| = {:.3e}",
        concat.sub(&sparse)?.max_abs()
    );
    println!(
        "concat vs dense block-diag: max |diff| = {:.3e}",
        concat.sub(&dense)?.max_abs()
    );

    let (a_eq, b_eq) = mel.expand_to_sparse();
    println!(
        "a_eq is {}x{}, b_eq is {}x{}; {} of {} entries are structural zeros",
        a_eq.rows(),
        a_eq.cols(),
        b_eq.rows(),
        b_eq.cols(),
        a_eq.as_slice()
            .iter()
            .chain(b_eq.as_slice())
            .filter(|v| **v == 0.0)
            .count(),
        a_eq.as_slice().len() + b_eq.as_slice().len()
    );

    let opts = InitOptions::default();
    let mut lora = Adapter::init(AdapterMode::Lora, d, d, 1, 4, &opts, 3)?;
    let mut single = Adapter::init(AdapterMode::Melora, d, d, 1, 4, &opts, 3)?;
    lora.randomize_b(1.0, 4);
    single.randomize_b(1.0, 4);
    println!(
        "n = 1 MELoRA == LoRA bitwise: {}",
        lora.forward_delta(&x)? == single.forward_delta(&x)?
    );
    Ok(())
}
