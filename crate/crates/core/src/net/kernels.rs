//! Closed-form infinite-order interaction kernels and their explicit
//! truncated series.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, UnaryKind, Var};

/// Number of degree-`k` monomials in `d` variables, `C(d+k-1, k)`.
pub fn interaction_space_dim(d: u64, k: u64) -> Result<u64> {
    if d == 0 {
        return Err(Error::config("interaction dimension needs d >= 1"));
    }
    let n = (d - 1).checked_add(k).ok_or_else(|| overflow(d, k))?;
    binomial(n, k).ok_or_else(|| overflow(d, k))
}

fn overflow(d: u64, k: u64) -> Error {
    Error::Domain(format!("interaction space dimension for d={d}, k={k} overflows 64 bits"))
}

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    u64::try_from(acc).ok()
}

/// Elementwise `1 / (1 - u)`; fails when any `|u| >= 1`.
pub fn geo_kernel<T: Real>(tape: &Tape<T>, u: Var) -> Result<Var> {
    tape.unary(UnaryKind::Geometric, u)
}

/// Elementwise `exp(u)`.
pub fn exp_kernel<T: Real>(tape: &Tape<T>, u: Var) -> Result<Var> {
    tape.exp(u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesKind {
    Geometric,
    Exponential,
}

/// `Σ_{k=0}^{K} u^{⊙k}` (geometric) or `Σ u^{⊙k} / k!` (exponential) by
/// repeated Hadamard products.
pub fn truncated_hadamard_series<T: Real>(tape: &Tape<T>, u: Var, order: usize, kind: SeriesKind) -> Result<Var> {
    let shape = tape.shape(u);
    let mut term = tape.constant(Tensor::ones(&shape));
    let mut acc = term;
    for k in 1..=order {
        term = tape.mul(term, u)?;
        if kind == SeriesKind::Exponential {
            term = tape.mul_scalar(term, 1.0 / k as f64)?;
        }
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}
