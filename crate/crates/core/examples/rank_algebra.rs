//! Rank identities behind MELoRA: sums are sub-additive, concatenations are
//! bracketed, block diagonals are exactly additive.
//!
//! cargo run --example rank_algebra

use melora::{block_diag, rank, Matrix};

fn low_rank(rows: usize, cols: usize, r: usize, rng: &mut melora::Rng) -> melora::Result<Matrix> {
    Matrix::gaussian(rows, r, 1.0, rng).matmul(&Matrix::gaussian(r, cols, 1.0, rng))
}

fn main() -> melora::Result<()> {
    let mut rng = melora::seeded_rng(42);
    let tol = 1e-8;
    let a = low_rank(16, 16, 3, &mut rng)?;
    let b = low_rank(16, 16, 2, &mut rng)?;

    println!("rank(A) = {}, rank(B) = {}", rank(&a, tol)?, rank(&b, tol)?);
    println!("rank(A + B)   = {}  (at most 5)", rank(&a.add(&b)?, tol)?);
    println!(
        "rank(A - A)   = {}  (sums have no lower bound)",
        rank(&a.sub(&a)?, tol)?
    );
    println!("rank([A | B]) = {}  (between 3 and 5)", rank(&a.hcat(&b)?, tol)?);
    println!(
        "rank([A | 2A]) = {} (shared column space hits the lower bound)",
        rank(&a.hcat(&a.scale(2.0))?, tol)?
    );

    let blocks = [
        low_rank(4, 4, 1, &mut rng)?,
        low_rank(6, 5, 2, &mut rng)?,
        low_rank(3, 3, 3, &mut rng)?,
    ];
    let diag = block_diag(&blocks)?;
    println!(
        "block_diag of ranks 1, 2, 3 is {}x{} with rank {}",
        diag.rows(),
        diag.cols(),
        rank(&diag, tol)?
    );
    Ok(())
}
