//! Floating point abstraction shared by every numerical routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an f64 literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Widening conversion used at f64-only boundaries (Gamma, eigen-solves, IO).
    fn f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `∫₀¹ w^k e^{-z w} dw` for k ∈ {0, 1, 2} and z ≥ 0, without cancellation at small z.
pub fn unit_moment<T: Scalar>(k: usize, z: T) -> T {
    debug_assert!(k <= 2);
    if z < T::of(0.5) {
        // Σ_n (-z)^n / (n! (n+k+1))
        let mut term = T::one();
        let mut acc = T::zero();
        for n in 0..40 {
            let contrib = term / T::of((n + k + 1) as f64);
            acc += contrib;
            if contrib.abs() < T::epsilon() * acc.abs() {
                break;
            }
            term = term * (-z) / T::of((n + 1) as f64);
        }
        acc
    } else {
        let e = (-z).exp();
        match k {
            0 => (T::one() - e) / z,
            1 => (T::one() - e * (T::one() + z)) / (z * z),
            _ => (T::of(2.0) - e * (z * z + T::of(2.0) * z + T::of(2.0))) / (z * z * z),
        }
    }
}

/// `∫₀^L v^k e^{-a v} dv` for a ≥ 0, L ≥ 0.
pub fn exp_moment<T: Scalar>(k: usize, a: T, len: T) -> T {
    len.powi(k as i32 + 1) * unit_moment(k, a * len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(k: usize, z: f64) -> f64 {
        // composite Simpson
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f = |w: f64| w.powi(k as i32) * (-z * w).exp();
        (0..=n)
            .map(|j| {
                let c = if j == 0 || j == n { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
                c * f(j as f64 * h) * h / 3.0
            })
            .sum()
    }

    #[test]
    fn unit_moments_match_quadrature_across_branch() {
        for k in 0..3 {
            for &z in &[0.0, 1e-9, 1e-3, 0.3, 0.49, 0.5, 0.51, 2.0, 40.0] {
                let got = unit_moment(k, z);
                let want = brute(k, z);
                assert!((got - want).abs() < 1e-9 * want.max(1e-3), "k={k} z={z} {got} {want}");
            }
        }
    }

    #[test]
    fn zero_rate_moments_are_powers() {
        assert_eq!(exp_moment(0, 0.0, 2.0), 2.0);
        assert!((exp_moment(2, 0.0, 2.0) - 8.0 / 3.0).abs() < 1e-15);
    }
}
