//! Named invariant checks behind `melora verify`.
//!
//! Each check draws its random instances from a seed derived from the
//! options seed and the check name, so a failure reproduces exactly. A
//! [`Sabotage`] deliberately breaks one computation to prove the suite can
//! fail and names the right check.

use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;

use crate::adapters::{
    count_params, flop_count, read_checkpoint, write_checkpoint, Adapter, AdapterMode, InitOptions, MeloraAdapter,
};
use crate::analysis::{audit_params, serial_stack_rank_demo, ModelShape};
use crate::error::{Error, Result};
use crate::matrix::{block_diag, rank, svd, Matrix};
use crate::train::{cross_entropy_loss, gradient_close, mse_loss, AdaptedLinear, LrSchedule, FD_STEP};
use crate::Rng;

/// Rank threshold for exact-arithmetic rank identities.
pub const RANK_THRESHOLD: f64 = 1e-8;
/// Relative tolerance for forward-form agreement.
pub const FORM_TOLERANCE: f64 = 1e-12;
/// Relative tolerance for SVD reconstruction and orthonormality.
pub const SVD_TOLERANCE: f64 = 1e-10;

pub const RANK_TRIALS: usize = 200;
pub const FORM_TRIALS: usize = 500;
pub const GRADIENT_INSTANCES: usize = 50;

/// Every check, in run order.
pub const CHECK_NAMES: [&str; 16] = [
    "eq2-subadditivity",
    "eq3-concat-bounds",
    "eq4-diag-additivity",
    "eq5-form-equivalence",
    "eq5-lora-degeneracy",
    "svd-reconstruction",
    "zero-init",
    "block-locality",
    "grad-fd-mse",
    "grad-fd-ce",
    "merge-equivalence",
    "param-counts",
    "flop-counts",
    "checkpoint-roundtrip",
    "schedule-shape",
    "serial-stack",
];

/// Fault injections for testing the suite itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sabotage {
    /// Drops the last mini's contribution before measuring rank.
    RankAdditivity,
    /// Perturbs the sparse-expanded forward result.
    FormEquivalence,
    /// Inflates analytic gradients by 0.1%.
    Gradient,
}

impl FromStr for Sabotage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank-additivity" => Ok(Sabotage::RankAdditivity),
            "form-equivalence" => Ok(Sabotage::FormEquivalence),
            "gradient" => Ok(Sabotage::Gradient),
            other => Err(Error::InvalidArgument(format!(
                "unknown sabotage {other:?} (expected rank-additivity, form-equivalence or gradient)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Runs only checks whose name contains this substring.
    pub filter: Option<String>,
    pub sabotage: Option<Sabotage>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckResult = std::result::Result<String, String>;

struct Ctx {
    rng: Rng,
    sabotage: Option<Sabotage>,
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn relative_gap(a: &Matrix, b: &Matrix) -> std::result::Result<f64, String> {
    let diff = a.sub(b).map_err(fail)?.frobenius_norm();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// `d x d` matrix of rank exactly `r` (with probability one).
fn low_rank(rows: usize, cols: usize, r: usize, rng: &mut Rng) -> std::result::Result<Matrix, String> {
    Matrix::gaussian(rows, r, 1.0, rng)
        .matmul(&Matrix::gaussian(r, cols, 1.0, rng))
        .map_err(fail)
}

fn mat_rank(m: &Matrix) -> std::result::Result<usize, String> {
    rank(m, RANK_THRESHOLD).map_err(fail)
}

/// A random feasible MELoRA shape from the acceptance grid with non-zero B.
fn random_melora(rng: &mut Rng) -> std::result::Result<(MeloraAdapter, usize), String> {
    loop {
        let n = [2, 4, 8][rng.random_range(0..3)];
        let r_mini = [1, 2, 4][rng.random_range(0..3)];
        let d = [16, 32, 64][rng.random_range(0..3)];
        // a mini cannot exceed the rank of its own block
        if r_mini > d / n {
            continue;
        }
        let seed = rng.random();
        let mut ad = Adapter::Melora(
            MeloraAdapter::init_with_options(d, d, n, r_mini, &InitOptions::default(), seed).map_err(fail)?,
        );
        ad.randomize_b(1.0, seed ^ 1);
        let Adapter::Melora(m) = ad else { unreachable!() };
        return Ok((m, d));
    }
}

fn eq2_subadditivity(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..100 {
        let d = rng.random_range(4..=24);
        let (ra, rb) = (rng.random_range(0..=d / 2), rng.random_range(0..=d / 2));
        let a = low_rank(d, d, ra, rng)?;
        let b = low_rank(d, d, rb, rng)?;
        let sum = mat_rank(&a.add(&b).map_err(fail)?)?;
        if sum > mat_rank(&a)? + mat_rank(&b)? {
            return Err(format!("trial {trial}: rank(A+B) = {sum} > {ra} + {rb}"));
        }
        // the sum has no lower bound: it collapses when B cancels A
        if mat_rank(&a.sub(&a).map_err(fail)?)? != 0 {
            return Err(format!("trial {trial}: rank(A - A) is not zero"));
        }
    }
    Ok("100 trials, rank(A+B) <= rank(A) + rank(B)".into())
}

fn eq3_concat_bounds(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..100 {
        let d = rng.random_range(4..=24);
        let (ra, rb) = (rng.random_range(0..=d / 2), rng.random_range(0..=d / 2));
        let a = low_rank(d, d, ra, rng)?;
        // every other trial shares B's column space with A to hit the lower bound
        let b = if trial % 2 == 0 {
            a.matmul(&Matrix::gaussian(d, d, 1.0, rng)).map_err(fail)?
        } else {
            low_rank(d, d, rb, rng)?
        };
        let (ka, kb) = (mat_rank(&a)?, mat_rank(&b)?);
        let cat = mat_rank(&a.hcat(&b).map_err(fail)?)?;
        if cat < ka.max(kb) || cat > ka + kb {
            return Err(format!(
                "trial {trial}: rank([A B]) = {cat} outside [{}, {}]",
                ka.max(kb),
                ka + kb
            ));
        }
    }
    Ok("100 trials, max(rank A, rank B) <= rank([A B]) <= rank A + rank B".into())
}

fn eq4_diag_additivity(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..50 {
        let k = rng.random_range(1..=4);
        let mut blocks = Vec::with_capacity(k);
        let mut total = 0;
        for _ in 0..k {
            let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let r = rng.random_range(0..=rows.min(cols));
            total += r;
            blocks.push(low_rank(rows, cols, r, rng)?);
        }
        let got = mat_rank(&block_diag(&blocks).map_err(fail)?)?;
        if got != total {
            return Err(format!("block trial {trial}: rank {got}, blocks sum to {total}"));
        }
    }
    for trial in 0..RANK_TRIALS {
        let (mut ad, d) = random_melora(rng)?;
        if ctx.sabotage == Some(Sabotage::RankAdditivity) {
            let last = ad.minis_mut().last_mut().expect("n >= 2");
            let [_, b] = last.params_mut();
            *b = Matrix::zeros(b.rows(), b.cols());
        }
        let (a_eq, b_eq) = ad.expand_to_sparse();
        let got = mat_rank(&b_eq.matmul(&a_eq).map_err(fail)?)?;
        let want = ad.n() * ad.r_mini();
        if got != want {
            return Err(format!(
                "trial {trial}: n={} r_mini={} d={d}: rank(b_eq a_eq) = {got}, expected {want}",
                ad.n(),
                ad.r_mini()
            ));
        }
    }
    Ok(format!("50 block trials and {RANK_TRIALS} adapters, rank = n * r_mini"))
}

fn eq5_form_equivalence(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    let mut worst: f64 = 0.0;
    for trial in 0..FORM_TRIALS {
        let (ad, d) = random_melora(rng)?;
        let x = Matrix::gaussian(d, rng.random_range(1..=4), 1.0, rng);
        let concat = ad.forward_delta(&x).map_err(fail)?;
        let mut sparse = ad.forward_delta_sparse(&x).map_err(fail)?;
        if ctx.sabotage == Some(Sabotage::FormEquivalence) {
            sparse = sparse.map(|v| v * (1.0 + 1e-9));
        }
        let dense = ad.forward_delta_dense(&x).map_err(fail)?;
        let gap = relative_gap(&concat, &sparse)?.max(relative_gap(&concat, &dense)?);
        worst = worst.max(gap);
        if gap > FORM_TOLERANCE {
            return Err(format!("trial {trial}: relative gap {gap:.3e} > {FORM_TOLERANCE:e}"));
        }
    }
    Ok(format!("{FORM_TRIALS} trials, worst relative gap {worst:.3e}"))
}

fn eq5_lora_degeneracy(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..50 {
        let (d_in, d_out) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let r = rng.random_range(1..=d_in.min(d_out).min(6));
        let seed = rng.random();
        let opts = InitOptions::default();
        let mut lora = Adapter::init(AdapterMode::Lora, d_in, d_out, 1, r, &opts, seed).map_err(fail)?;
        let mut mel = Adapter::init(AdapterMode::Melora, d_in, d_out, 1, r, &opts, seed).map_err(fail)?;
        lora.randomize_b(1.0, seed);
        mel.randomize_b(1.0, seed);
        let x = Matrix::gaussian(d_in, 3, 1.0, rng);
        let (a, b) = (
            lora.forward_delta(&x).map_err(fail)?,
            mel.forward_delta(&x).map_err(fail)?,
        );
        let same = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(p, q)| p.to_bits() == q.to_bits());
        if !same || lora.params() != mel.params() {
            return Err(format!(
                "trial {trial}: n=1 MELoRA differs from LoRA ({d_in}x{d_out}, r={r})"
            ));
        }
    }
    Ok("50 trials, bitwise identical parameters and outputs".into())
}

fn svd_reconstruction(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    let mut worst: f64 = 0.0;
    for trial in 0..60 {
        let (rows, cols) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let m = if trial % 3 == 0 {
            low_rank(rows, cols, rng.random_range(0..=rows.min(cols)), rng)?
        } else {
            Matrix::gaussian(rows, cols, 1.0, rng)
        };
        let s = svd(&m).map_err(fail)?;
        let recon = relative_gap(&m, &s.reconstruct())?;
        let k = s.singular_values.len();
        let eye = Matrix::identity(k);
        let u_orth = s
            .left_vectors
            .t_matmul(&s.left_vectors)
            .map_err(fail)?
            .sub(&eye)
            .map_err(fail)?
            .max_abs();
        let v_orth = s
            .right_vectors
            .t_matmul(&s.right_vectors)
            .map_err(fail)?
            .sub(&eye)
            .map_err(fail)?
            .max_abs();
        let sorted = s.singular_values.windows(2).all(|w| w[0] >= w[1]) && s.singular_values.iter().all(|v| *v >= 0.0);
        worst = worst.max(recon);
        if recon > SVD_TOLERANCE || u_orth > SVD_TOLERANCE || v_orth > SVD_TOLERANCE || !sorted {
            return Err(format!(
                "trial {trial} ({rows}x{cols}): reconstruction {recon:.2e}, U orth {u_orth:.2e}, V orth {v_orth:.2e}, sorted {sorted}"
            ));
        }
    }
    Ok(format!("60 matrices up to 32x32, worst reconstruction {worst:.3e}"))
}

fn zero_init(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for (mode, n) in [(AdapterMode::Lora, 1), (AdapterMode::Melora, 4)] {
        let ad = Adapter::init(mode, 16, 16, n, 2, &InitOptions::default(), rng.random()).map_err(fail)?;
        let w = Matrix::gaussian(16, 16, 1.0, rng);
        let x = Matrix::gaussian(16, 5, 1.0, rng);
        if ad.forward(&w, &x).map_err(fail)? != w.matmul(&x).map_err(fail)? {
            return Err(format!("fresh {mode} adapter changes the base output"));
        }
        if ad.blocks().iter().any(|b| b.a().max_abs() == 0.0) {
            return Err(format!("fresh {mode} adapter has an all-zero A"));
        }
    }
    Ok("fresh adapters leave W x unchanged".into())
}

fn block_locality(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..50 {
        let (ad, d) = random_melora(rng)?;
        let (n, bin, bout) = (ad.n(), ad.block_in(), ad.block_out());
        let x = Matrix::gaussian(d, 1, 1.0, rng);
        let base = ad.forward_delta(&x).map_err(fail)?;
        let i = rng.random_range(0..n);
        let mut moved = x.clone();
        for r in i * bin..(i + 1) * bin {
            moved.set(r, 0, moved.get(r, 0) + rng.random_range(-1.0..1.0));
        }
        let out = ad.forward_delta(&moved).map_err(fail)?;
        for j in 0..n {
            if j == i {
                continue;
            }
            if out.row_block(j * bout, (j + 1) * bout) != base.row_block(j * bout, (j + 1) * bout) {
                return Err(format!(
                    "trial {trial}: perturbing input block {i} changed output block {j}"
                ));
            }
        }
    }
    Ok("50 trials, input block i only moves output block i".into())
}

enum LossKind {
    Mse,
    CrossEntropy,
}

fn gradient_check(ctx: &mut Ctx, kind: LossKind) -> CheckResult {
    let rng = &mut ctx.rng;
    let inflate = if ctx.sabotage == Some(Sabotage::Gradient) {
        1.001
    } else {
        1.0
    };
    let mut entries = 0usize;
    for instance in 0..GRADIENT_INSTANCES {
        let mode = if instance % 2 == 0 {
            AdapterMode::Lora
        } else {
            AdapterMode::Melora
        };
        let n = if mode == AdapterMode::Lora {
            1
        } else {
            [2, 4][rng.random_range(0..2)]
        };
        let d = 8;
        let d_out = match kind {
            LossKind::Mse => 8,
            LossKind::CrossEntropy => 4,
        };
        let r = rng.random_range(1..=(d_out / n).min(2));
        let seed = rng.random();
        let mut ad = Adapter::init(mode, d, d_out, n, r, &InitOptions::with_alpha(2.0), seed).map_err(fail)?;
        ad.randomize_b(0.5, seed ^ 7);
        let mut layer = AdaptedLinear::new(Matrix::gaussian(d_out, d, 0.5, rng), ad).map_err(fail)?;
        let batch = rng.random_range(1..=4);
        let x = Matrix::gaussian(d, batch, 1.0, rng);
        let target = Matrix::gaussian(d_out, batch, 1.0, rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..d_out)).collect();
        let loss = |l: &AdaptedLinear| -> std::result::Result<(f64, Matrix), String> {
            let out = l.forward(&x).map_err(fail)?;
            match kind {
                LossKind::Mse => mse_loss(&out, &target).map_err(fail),
                LossKind::CrossEntropy => cross_entropy_loss(&out, &labels).map_err(fail),
            }
        };
        let (_, upstream) = loss(&layer)?;
        layer.backward(&x, &upstream).map_err(fail)?;
        let analytic = layer.grads().to_vec();
        for (k, g) in analytic.iter().enumerate() {
            for idx in 0..g.as_slice().len() {
                let mut plus = layer.clone();
                plus.params_mut()[k].as_mut_slice()[idx] += FD_STEP;
                let mut minus = layer.clone();
                minus.params_mut()[k].as_mut_slice()[idx] -= FD_STEP;
                let numeric = (loss(&plus)?.0 - loss(&minus)?.0) / (2.0 * FD_STEP);
                let an = g.as_slice()[idx] * inflate;
                if !gradient_close(an, numeric) {
                    return Err(format!(
                        "instance {instance} ({mode}, n={n}, r={r}) tensor {k}[{idx}]: analytic {an:.9e}, numeric {numeric:.9e}"
                    ));
                }
                entries += 1;
            }
        }
    }
    Ok(format!(
        "{GRADIENT_INSTANCES} instances, {entries} entries within tolerance"
    ))
}

fn merge_equivalence(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..50 {
        let (ad, d) = random_melora(rng)?;
        let ad = Adapter::Melora(ad);
        let w = Matrix::gaussian(d, d, 1.0, rng);
        let x = Matrix::gaussian(d, 3, 1.0, rng);
        let merged = ad.merge(&w).map_err(fail)?.matmul(&x).map_err(fail)?;
        let gap = relative_gap(&merged, &ad.forward(&w, &x).map_err(fail)?)?;
        if gap > FORM_TOLERANCE {
            return Err(format!("trial {trial}: merged output differs by {gap:.3e}"));
        }
    }
    Ok("50 trials, (W + s ΔW) x equals W x + s ΔW x".into())
}

fn param_counts(_: &mut Ctx) -> CheckResult {
    let roberta = ModelShape::preset("roberta-base-qv").map_err(fail)?;
    let llama = ModelShape::preset("llama2-7b-qv").map_err(fail)?;
    let cases = [
        (&roberta, AdapterMode::Lora, 1, 8, 294_912),
        (&roberta, AdapterMode::Melora, 8, 1, 36_864),
        (&roberta, AdapterMode::Melora, 2, 4, 147_456),
        (&llama, AdapterMode::Lora, 1, 64, 33_554_432),
        (&llama, AdapterMode::Melora, 16, 1, 524_288),
    ];
    for (shape, mode, n, r, want) in cases {
        let got = audit_params(shape, mode, n, r).map_err(fail)?;
        if got != want {
            return Err(format!("{} {mode} n={n} r={r}: {got}, expected {want}", shape.name));
        }
    }
    // one mini of each size: n * r_mini * (d/n + d/n) = r_mini * 2d
    for n in [1, 2, 4, 8] {
        if count_params(64, 64, n, 3).map_err(fail)? != 3 * 128 {
            return Err(format!("count_params(64, 64, {n}, 3) is not independent of n"));
        }
    }
    Ok("preset totals exact; per-matrix count independent of n".into())
}

fn flop_counts(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for (d, r, n) in [(64, 8, 1), (64, 8, 2), (64, 8, 8), (32, 4, 4)] {
        let mode = if n == 1 { AdapterMode::Lora } else { AdapterMode::Melora };
        let ad = Adapter::init(mode, d, d, n, r / n, &InitOptions::default(), rng.random()).map_err(fail)?;
        let x = Matrix::gaussian(d, 1, 1.0, rng);
        let (_, macs) = ad.forward_delta_counted(&x).map_err(fail)?;
        let fc = flop_count(d, r, n).map_err(fail)?;
        if macs != fc.serial_ops || fc.parallel_critical_path * n as u64 != fc.serial_ops {
            return Err(format!("d={d} r={r} n={n}: counted {macs}, formula {fc:?}"));
        }
    }
    Ok("instrumented multiply-adds match 2rd/n".into())
}

fn checkpoint_roundtrip(ctx: &mut Ctx) -> CheckResult {
    let rng = &mut ctx.rng;
    for trial in 0..20 {
        let (ad, _) = random_melora(rng)?;
        let ad = Adapter::Melora(ad);
        let mut bytes = Vec::new();
        write_checkpoint(&ad, &mut bytes).map_err(fail)?;
        let back = read_checkpoint(bytes.as_slice()).map_err(fail)?;
        if back != ad {
            return Err(format!("trial {trial}: round trip changed the adapter"));
        }
        let cut = rng.random_range(0..bytes.len());
        match read_checkpoint(&bytes[..cut]) {
            Err(Error::UnexpectedEof) => {}
            other => return Err(format!("trial {trial}: truncation at {cut} gave {other:?}")),
        }
    }
    match read_checkpoint(&b"NOPE\x01\x00"[..]) {
        Err(Error::BadMagic(_)) => Ok("20 round trips bit-exact; truncation and bad magic rejected".into()),
        other => Err(format!("bad magic accepted: {other:?}")),
    }
}

fn schedule_shape(_: &mut Ctx) -> CheckResult {
    let s = LrSchedule::new(1e-3, 100, 1000).map_err(fail)?;
    let lrs: Vec<f64> = (0..=1000).map(|t| s.lr(t)).collect();
    let rising = lrs[..=100].windows(2).all(|w| w[1] > w[0]);
    let falling = lrs[100..].windows(2).all(|w| w[1] < w[0]);
    if lrs[0] != 0.0 || lrs[100] != 1e-3 || lrs[1000] != 0.0 || !rising || !falling {
        return Err(format!(
            "lr(0)={}, lr(100)={}, lr(1000)={}, rising {rising}, falling {falling}",
            lrs[0], lrs[100], lrs[1000]
        ));
    }
    if LrSchedule::new(1e-3, 10, 10).is_ok() {
        return Err("warmup equal to total steps was accepted".into());
    }
    Ok("linear warmup to the peak, linear decay to zero".into())
}

fn serial_stack(ctx: &mut Ctx) -> CheckResult {
    let seed = ctx.rng.random();
    let full = serial_stack_rank_demo(4, 2, 32, 1.0, seed).map_err(fail)?;
    let none = serial_stack_rank_demo(4, 2, 32, 0.0, seed).map_err(fail)?;
    if (full.serial_rank, full.block_diag_rank) != (2, 8) || (none.serial_rank, none.block_diag_rank) != (8, 8) {
        return Err(format!("overlap 1: {full:?}; overlap 0: {none:?}"));
    }
    Ok("overlap 1: serial 2 vs block-diagonal 8; overlap 0: both 8".into())
}

fn dispatch(name: &str, ctx: &mut Ctx) -> CheckResult {
    match name {
        "eq2-subadditivity" => eq2_subadditivity(ctx),
        "eq3-concat-bounds" => eq3_concat_bounds(ctx),
        "eq4-diag-additivity" => eq4_diag_additivity(ctx),
        "eq5-form-equivalence" => eq5_form_equivalence(ctx),
        "eq5-lora-degeneracy" => eq5_lora_degeneracy(ctx),
        "svd-reconstruction" => svd_reconstruction(ctx),
        "zero-init" => zero_init(ctx),
        "block-locality" => block_locality(ctx),
        "grad-fd-mse" => gradient_check(ctx, LossKind::Mse),
        "grad-fd-ce" => gradient_check(ctx, LossKind::CrossEntropy),
        "merge-equivalence" => merge_equivalence(ctx),
        "param-counts" => param_counts(ctx),
        "flop-counts" => flop_counts(ctx),
        "checkpoint-roundtrip" => checkpoint_roundtrip(ctx),
        "schedule-shape" => schedule_shape(ctx),
        "serial-stack" => serial_stack(ctx),
        other => Err(format!("no check named {other:?}")),
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name keeps each check's stream independent of the others
    name.bytes().fold(0xcbf2_9ce4_8422_2325_u64 ^ seed, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Runs a single named check.
pub fn run_check(name: &str, options: &VerifyOptions) -> Result<CheckOutcome> {
    let name: &'static str = CHECK_NAMES
        .iter()
        .find(|n| **n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("no check named {name:?}")))?;
    let mut ctx = Ctx {
        rng: crate::seeded_rng(name_seed(options.seed, name)),
        sabotage: options.sabotage,
    };
    let (passed, detail) = match dispatch(name, &mut ctx) {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Ok(CheckOutcome { name, passed, detail })
}

/// Runs every check matching the filter, in [`CHECK_NAMES`] order.
pub fn run_all(options: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let selected: Vec<&str> = CHECK_NAMES
        .iter()
        .copied()
        .filter(|n| options.filter.as_deref().is_none_or(|f| n.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "filter {:?} matches no check",
            options.filter.as_deref().unwrap_or("")
        )));
    }
    selected.into_iter().map(|n| run_check(n, options)).collect()
}

pub fn write_verify_csv<W: Write>(outcomes: &[CheckOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["check", "outcome", "detail"])?;
    for o in outcomes {
        w.write_record([o.name, if o.passed { "pass" } else { "fail" }, o.detail.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
