use crate::adapters::lora::{check_base, InitOptions, LoraAdapter};
use crate::error::{Error, Result};
use crate::matrix::{block_diag, Matrix};

/// `n` mini LoRA pairs acting on disjoint contiguous feature blocks.
///
/// Mini `i` reads input rows `[i·d_in/n, (i+1)·d_in/n)` and writes output
/// rows `[i·d_out/n, (i+1)·d_out/n)`. Every mini has rank `r_mini` and the
/// same `alpha`, so they all share the scale `alpha / r_mini`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeloraAdapter {
    minis: Vec<LoraAdapter>,
    d_in: usize,
    d_out: usize,
    seed: u64,
}

pub(crate) fn check_divisible(d_in: usize, d_out: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !d_in.is_multiple_of(n) {
        return Err(Error::NotDivisible {
            what: "d_in".into(),
            dim: d_in,
            n,
        });
    }
    if !d_out.is_multiple_of(n) {
        return Err(Error::NotDivisible {
            what: "d_out".into(),
            dim: d_out,
            n,
        });
    }
    Ok(())
}

impl MeloraAdapter {
    pub fn init(d_in: usize, d_out: usize, n: usize, r_mini: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::init_with_options(d_in, d_out, n, r_mini, &InitOptions::with_alpha(alpha), seed)
    }

    /// The minis draw their `A` fills from one seeded stream in block order,
    /// so `n = 1` reproduces [`LoraAdapter::init_with_options`] bit for bit.
    pub fn init_with_options(
        d_in: usize,
        d_out: usize,
        n: usize,
        r_mini: usize,
        opts: &InitOptions,
        seed: u64,
    ) -> Result<Self> {
        check_divisible(d_in, d_out, n)?;
        let mut rng = crate::seeded_rng(seed);
        let minis = (0..n)
            .map(|_| LoraAdapter::init_with_rng(d_in / n, d_out / n, r_mini, opts, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeloraAdapter {
            minis,
            d_in,
            d_out,
            seed,
        })
    }

    pub fn from_minis(minis: Vec<LoraAdapter>) -> Result<Self> {
        let first = minis.first().ok_or(Error::Empty("MeloraAdapter::from_minis"))?;
        let (bi, bo, r, alpha, p) = (
            first.d_in(),
            first.d_out(),
            first.rank(),
            first.alpha(),
            first.dropout_p(),
        );
        for m in &minis {
            if (m.d_in(), m.d_out(), m.rank()) != (bi, bo, r) || m.alpha() != alpha || m.dropout_p() != p {
                return Err(Error::InvalidArgument(
                    "all minis must share shape, alpha and dropout".into(),
                ));
            }
        }
        let n = minis.len();
        Ok(MeloraAdapter {
            minis,
            d_in: bi * n,
            d_out: bo * n,
            seed: 0,
        })
    }

    pub fn minis(&self) -> &[LoraAdapter] {
        &self.minis
    }

    pub fn minis_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.minis
    }

    pub fn n(&self) -> usize {
        self.minis.len()
    }

    pub fn r_mini(&self) -> usize {
        self.minis[0].rank()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn alpha(&self) -> f64 {
        self.minis[0].alpha()
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        for m in &mut self.minis {
            m.set_alpha(alpha)?;
        }
        Ok(())
    }

    pub fn dropout_p(&self) -> f64 {
        self.minis[0].dropout_p()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn scale(&self) -> f64 {
        self.minis[0].scale()
    }

    pub fn block_in(&self) -> usize {
        self.d_in / self.n()
    }

    pub fn block_out(&self) -> usize {
        self.d_out / self.n()
    }

    pub fn param_count(&self) -> u64 {
        self.minis.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn equivalent_rank(&self) -> usize {
        self.n() * self.r_mini()
    }

    /// Concat form: split `x` into blocks, run each mini, stack the outputs.
    pub fn forward_delta(&self, x: &Matrix) -> Result<Matrix> {
        let mut macs = 0;
        self.forward_delta_counted(x, &mut macs)
    }

    pub(crate) fn forward_delta_counted(&self, x: &Matrix, macs: &mut u64) -> Result<Matrix> {
        if x.rows() != self.d_in {
            return Err(Error::shape(
                "melora forward (x rows vs d_in)",
                x.shape(),
                (self.d_in, x.cols()),
            ));
        }
        let (bi, bo) = (self.block_in(), self.block_out());
        let mut out = Matrix::zeros(self.d_out, x.cols());
        for (i, mini) in self.minis.iter().enumerate() {
            let xi = x.row_block(i * bi, (i + 1) * bi);
            out.set_block(i * bo, 0, &mini.forward_delta_counted(&xi, macs)?);
        }
        Ok(out)
    }

    pub fn forward(&self, w: &Matrix, x: &Matrix) -> Result<Matrix> {
        check_base(w, self.d_in, self.d_out)?;
        w.matmul(x)?.add(&self.forward_delta(x)?)
    }

    /// Zero-padded equivalents `(block_diag(A_i), block_diag(B_i))`.
    pub fn expand_to_sparse(&self) -> (Matrix, Matrix) {
        let a: Vec<Matrix> = self.minis.iter().map(|m| m.a().clone()).collect();
        let b: Vec<Matrix> = self.minis.iter().map(|m| m.b().clone()).collect();
        (
            block_diag(&a).expect("at least one mini"),
            block_diag(&b).expect("at least one mini"),
        )
    }

    /// `scale · block_diag(B_i · A_i)`.
    pub fn delta_weight(&self) -> Matrix {
        let products: Vec<Matrix> = self.minis.iter().map(LoraAdapter::product).collect();
        block_diag(&products).expect("at least one mini").scale(self.scale())
    }

    /// Product-of-diagonals form: `scale · b_eq · (a_eq · x)`.
    pub fn forward_delta_sparse(&self, x: &Matrix) -> Result<Matrix> {
        let (a_eq, b_eq) = self.expand_to_sparse();
        Ok(b_eq.matmul(&a_eq.matmul(x)?)?.scale(self.scale()))
    }

    /// Diagonal-of-products form: `(scale · block_diag(B_i A_i)) · x`.
    pub fn forward_delta_dense(&self, x: &Matrix) -> Result<Matrix> {
        self.delta_weight().matmul(x)
    }

    pub fn merge(&self, w: &Matrix) -> Result<Matrix> {
        check_base(w, self.d_in, self.d_out)?;
        w.add(&self.delta_weight())
    }
}
