//! Shared numeric kernels.

use crate::scalar::Real;

/// Inner product of two equal-length vectors.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow; `-ln sigmoid(x) = softplus(-x)`.
pub fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cosine similarity clamped to `[-1, 1]`; zero-norm inputs map to 0.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut aa = F::zero();
    let mut bb = F::zero();
    let mut ab = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    if aa == F::zero() || bb == F::zero() {
        return F::zero();
    }
    let c = ab / (aa.sqrt() * bb.sqrt());
    c.min(F::one()).max(-F::one())
}
