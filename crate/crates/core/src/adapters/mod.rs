//! LoRA and MELoRA adapters.

mod accounting;
mod checkpoint;
mod lora;
mod melora;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use accounting::{count_params, equivalent_rank, flop_count, FlopCount};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use lora::{InitOptions, LoraAdapter, DEFAULT_ALPHA};
pub use melora::MeloraAdapter;

pub(crate) use melora::check_divisible;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Lora,
    Melora,
}

impl AdapterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::Lora => "lora",
            AdapterMode::Melora => "melora",
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterMode::Lora),
            "melora" => Ok(AdapterMode::Melora),
            other => Err(Error::InvalidArgument(format!(
                "unknown adapter mode {other:?} (expected lora or melora)"
            ))),
        }
    }
}

/// Either adapter kind. A LoRA adapter behaves as a MELoRA adapter with a
/// single block, which lets training and analysis treat both uniformly
/// through [`Adapter::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Melora(MeloraAdapter),
}

impl From<LoraAdapter> for Adapter {
    fn from(a: LoraAdapter) -> Self {
        Adapter::Lora(a)
    }
}

impl From<MeloraAdapter> for Adapter {
    fn from(a: MeloraAdapter) -> Self {
        Adapter::Melora(a)
    }
}

impl Adapter {
    /// `n` is ignored (must be 1) for LoRA; `r_mini` is then the LoRA rank.
    pub fn init(
        mode: AdapterMode,
        d_in: usize,
        d_out: usize,
        n: usize,
        r_mini: usize,
        opts: &InitOptions,
        seed: u64,
    ) -> Result<Self> {
        match mode {
            AdapterMode::Lora => {
                if n != 1 {
                    return Err(Error::InvalidArgument(format!("lora mode requires n = 1, got {n}")));
                }
                LoraAdapter::init_with_options(d_in, d_out, r_mini, opts, seed).map(Adapter::Lora)
            }
            AdapterMode::Melora => {
                MeloraAdapter::init_with_options(d_in, d_out, n, r_mini, opts, seed).map(Adapter::Melora)
            }
        }
    }

    pub fn mode(&self) -> AdapterMode {
        match self {
            Adapter::Lora(_) => AdapterMode::Lora,
            Adapter::Melora(_) => AdapterMode::Melora,
        }
    }

    pub fn blocks(&self) -> &[LoraAdapter] {
        match self {
            Adapter::Lora(l) => std::slice::from_ref(l),
            Adapter::Melora(m) => m.minis(),
        }
    }

    pub fn blocks_mut(&mut self) -> &mut [LoraAdapter] {
        match self {
            Adapter::Lora(l) => std::slice::from_mut(l),
            Adapter::Melora(m) => m.minis_mut(),
        }
    }

    /// Trainable tensors in canonical order `A_0, B_0, A_1, B_1, ...`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.blocks().iter().flat_map(|b| [b.a(), b.b()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.blocks_mut().iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn n(&self) -> usize {
        self.blocks().len()
    }

    pub fn r_mini(&self) -> usize {
        self.blocks()[0].rank()
    }

    pub fn d_in(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.d_in(),
            Adapter::Melora(m) => m.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.d_out(),
            Adapter::Melora(m) => m.d_out(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.blocks()[0].alpha()
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        for b in self.blocks_mut() {
            b.set_alpha(alpha)?;
        }
        Ok(())
    }

    pub fn dropout_p(&self) -> f64 {
        self.blocks()[0].dropout_p()
    }

    pub fn seed(&self) -> u64 {
        match self {
            Adapter::Lora(l) => l.seed(),
            Adapter::Melora(m) => m.seed(),
        }
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        match self {
            Adapter::Lora(l) => l.set_seed(seed),
            Adapter::Melora(m) => m.set_seed(seed),
        }
    }

    pub fn scale(&self) -> f64 {
        self.blocks()[0].scale()
    }

    pub fn param_count(&self) -> u64 {
        self.blocks().iter().map(LoraAdapter::param_count).sum()
    }

    pub fn equivalent_rank(&self) -> usize {
        self.n() * self.r_mini()
    }

    pub fn forward_delta(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::Lora(l) => l.forward_delta(x),
            Adapter::Melora(m) => m.forward_delta(x),
        }
    }

    /// Adapter-path output together with the multiply-accumulates spent on it.
    pub fn forward_delta_counted(&self, x: &Matrix) -> Result<(Matrix, u64)> {
        let mut macs = 0;
        let out = match self {
            Adapter::Lora(l) => l.forward_delta_counted(x, &mut macs)?,
            Adapter::Melora(m) => m.forward_delta_counted(x, &mut macs)?,
        };
        Ok((out, macs))
    }

    pub fn forward(&self, w: &Matrix, x: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::Lora(l) => l.forward(w, x),
            Adapter::Melora(m) => m.forward(w, x),
        }
    }

    /// `(a_eq, b_eq)`; for LoRA simply `(A, B)`.
    pub fn expand_to_sparse(&self) -> (Matrix, Matrix) {
        match self {
            Adapter::Lora(l) => (l.a().clone(), l.b().clone()),
            Adapter::Melora(m) => m.expand_to_sparse(),
        }
    }

    /// The scaled effective update `ΔW`.
    pub fn delta_weight(&self) -> Matrix {
        match self {
            Adapter::Lora(l) => l.delta_weight(),
            Adapter::Melora(m) => m.delta_weight(),
        }
    }

    /// `W + ΔW`. Not idempotent: merging a merged weight adds `ΔW` again.
    pub fn merge(&self, w: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::Lora(l) => l.merge(w),
            Adapter::Melora(m) => m.merge(w),
        }
    }

    /// Overwrites every `B_i` with an `N(0, std²)` fill. Fresh adapters have
    /// zero updates; this gives analyses and demos a generic non-zero one.
    pub fn randomize_b(&mut self, std: f64, seed: u64) {
        let mut rng = crate::seeded_rng(seed);
        for block in self.blocks_mut() {
            let [_, b] = block.params_mut();
            *b = Matrix::gaussian(b.rows(), b.cols(), std, &mut rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::rank;
    use crate::seeded_rng;

    #[test]
    fn mode_round_trips_through_strings() {
        for m in [AdapterMode::Lora, AdapterMode::Melora] {
            assert_eq!(m.as_str().parse::<AdapterMode>().unwrap(), m);
        }
        assert!("dora".parse::<AdapterMode>().is_err());
    }

    #[test]
    fn lora_mode_requires_single_block() {
        assert!(Adapter::init(AdapterMode::Lora, 8, 8, 2, 1, &InitOptions::default(), 0).is_err());
    }

    #[test]
    fn single_block_melora_matches_lora_bitwise() {
        let opts = InitOptions::default();
        let mut lora = Adapter::init(AdapterMode::Lora, 16, 12, 1, 4, &opts, 77).unwrap();
        let mut melora = Adapter::init(AdapterMode::Melora, 16, 12, 1, 4, &opts, 77).unwrap();
        lora.randomize_b(1.0, 3);
        melora.randomize_b(1.0, 3);
        let mut rng = seeded_rng(0);
        let w = Matrix::gaussian(12, 16, 1.0, &mut rng);
        let x = Matrix::gaussian(16, 5, 1.0, &mut rng);
        let a = lora.forward(&w, &x).unwrap();
        let b = melora.forward(&w, &x).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn merge_matches_forward_and_is_not_idempotent() {
        let mut rng = seeded_rng(12);
        let mut ad = Adapter::init(AdapterMode::Melora, 16, 16, 4, 2, &InitOptions::default(), 1).unwrap();
        let w = Matrix::gaussian(16, 16, 1.0, &mut rng);
        assert_eq!(ad.merge(&w).unwrap(), w);
        ad.randomize_b(0.5, 2);
        let merged = ad.merge(&w).unwrap();
        for _ in 0..100 {
            let x = Matrix::gaussian(16, 1, 1.0, &mut rng);
            let via_merge = merged.matmul(&x).unwrap();
            let via_adapter = ad.forward(&w, &x).unwrap();
            assert!(via_merge.sub(&via_adapter).unwrap().max_abs() < 1e-10);
        }
        let twice = ad.merge(&merged).unwrap();
        let expected = ad.delta_weight().scale(2.0);
        assert!(twice.sub(&w).unwrap().sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn update_rank_never_exceeds_equivalent_rank() {
        let mut ad = Adapter::init(AdapterMode::Lora, 20, 10, 1, 3, &InitOptions::default(), 5).unwrap();
        ad.randomize_b(1.0, 6);
        assert_eq!(rank(&ad.delta_weight(), 1e-8).unwrap(), 3);
    }

    #[test]
    fn instrumented_macs_match_serial_flop_count() {
        for (d, r, n) in [(768, 8, 1), (768, 8, 4), (64, 8, 8), (32, 4, 2)] {
            let ad = Adapter::init(AdapterMode::Melora, d, d, n, r / n, &InitOptions::default(), 0).unwrap();
            let x = Matrix::zeros(d, 1);
            let (_, macs) = ad.forward_delta_counted(&x).unwrap();
            assert_eq!(macs, flop_count(d, r, n).unwrap().serial_ops);
        }
    }
}
