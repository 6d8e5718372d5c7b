//! Analytic adapter gradients against central finite differences.
//!
//! cargo run --example gradient_check

use melora::adapters::InitOptions;
use melora::train::{gradient_close, mse_loss, AdaptedLinear, FD_STEP};
use melora::{Adapter, AdapterMode, Matrix};

fn main() -> melora::Result<()> {
    let mut rng = melora::seeded_rng(5);
    for (mode, n) in [(AdapterMode::Lora, 1), (AdapterMode::Melora, 4)] {
        let mut ad = Adapter::init(mode, 8, 8, n, 2, &InitOptions::with_alpha(4.0), 1)?;
        ad.randomize_b(0.5, 2);
        let mut layer = AdaptedLinear::new(Matrix::gaussian(8, 8, 0.5, &mut rng), ad)?;
        let x = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let target = Matrix::gaussian(8, 4, 1.0, &mut rng);

        let (_, upstream) = mse_loss(&layer.forward(&x)?, &target)?;
        layer.backward(&x, &upstream)?;
        let grads = layer.grads().to_vec();

        let (mut worst, mut checked, mut bad) = (0.0f64, 0, 0);
        for (k, g) in grads.iter().enumerate() {
            for idx in 0..g.as_slice().len() {
                let mut plus = layer.clone();
                plus.params_mut()[k].as_mut_slice()[idx] += FD_STEP;
                let mut minus = layer.clone();
                minus.params_mut()[k].as_mut_slice()[idx] -= FD_STEP;
                let numeric = (mse_loss(&plus.forward(&x)?, &target)?.0 - mse_loss(&minus.forward(&x)?, &target)?.0)
                    / (2.0 * FD_STEP);
                let analytic = g.as_slice()[idx];
                worst = worst.max((analytic - numeric).abs());
                checked += 1;
                bad += usize::from(!gradient_close(analytic, numeric));
            }
        }
        println!("{mode} n={n}: {checked} entries, {bad} outside tolerance, worst abs diff {worst:.2e}");
    }
    Ok(())
}
