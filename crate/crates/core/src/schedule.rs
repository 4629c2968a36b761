//! Drift and diffusion functions of the forward dynamics.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Fractional variance exploding: μ ≡ 0, geometric σ.
    Fve,
    /// Fractional variance preserving: μ = −β/2, σ = √β.
    Fvp,
    /// Sub-variance-preserving diffusion √(β(1 − e^{−2∫β})).
    SubFvp,
    /// Diagnostic schedule σ(t) = t, μ ≡ 0.
    Linear,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Fve => 0,
            ScheduleKind::Fvp => 1,
            ScheduleKind::SubFvp => 2,
            ScheduleKind::Linear => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ScheduleKind::Fve,
            1 => ScheduleKind::Fvp,
            2 => ScheduleKind::SubFvp,
            3 => ScheduleKind::Linear,
            _ => return None,
        })
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Fve => "fve",
            ScheduleKind::Fvp => "fvp",
            ScheduleKind::SubFvp => "subfvp",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fve" => Ok(ScheduleKind::Fve),
            "fvp" => Ok(ScheduleKind::Fvp),
            "subfvp" => Ok(ScheduleKind::SubFvp),
            "linear" => Ok(ScheduleKind::Linear),
            _ => Err(Error::Config(format!("unknown dynamics kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule<T> {
    pub kind: ScheduleKind,
    pub sigma_min: T,
    pub sigma_max: T,
    pub beta_min: T,
    pub beta_max: T,
    pub horizon: T,
    /// Scalar applied to the diffusion so the terminal variance hits its target.
    pub norm_factor: T,
}

impl<T: Scalar> Schedule<T> {
    pub fn new(kind: ScheduleKind) -> Self {
        Self {
            kind,
            sigma_min: T::of(0.01),
            sigma_max: T::of(50.0),
            beta_min: T::of(0.1),
            beta_max: T::of(20.0),
            horizon: T::one(),
            norm_factor: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !pos(self.horizon) || !pos(self.norm_factor) {
            return invalid("horizon and norm_factor must be positive");
        }
        match self.kind {
            ScheduleKind::Fve if !(pos(self.sigma_min) && self.sigma_min < self.sigma_max) => {
                invalid("FVE requires 0 < sigma_min < sigma_max")
            }
            ScheduleKind::Fvp | ScheduleKind::SubFvp
                if !(pos(self.beta_min) && pos(self.beta_max)) =>
            {
                invalid("beta_min and beta_max must be positive")
            }
            _ => Ok(()),
        }
    }

    fn check_time(&self, t: T) -> Result<()> {
        if t < T::zero() || t > self.horizon || t.is_nan() {
            return invalid(format!("time {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }

    pub fn beta(&self, t: T) -> T {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// ∫₀^t β(u) du
    pub fn beta_integral(&self, t: T) -> T {
        self.beta_min * t + T::of(0.5) * t * t * (self.beta_max - self.beta_min)
    }

    /// μ(t) without range checks.
    pub fn mu(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::Fvp | ScheduleKind::SubFvp => -T::of(0.5) * self.beta(t),
            ScheduleKind::Fve | ScheduleKind::Linear => T::zero(),
        }
    }

    /// σ(t) including the normalisation factor, without range checks.
    pub fn sigma(&self, t: T) -> T {
        self.norm_factor * self.base_sigma(t)
    }

    fn base_sigma(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::Fve => {
                let ratio = self.sigma_max / self.sigma_min;
                self.sigma_min * ratio.powf(t) * (T::of(2.0) * ratio.ln()).sqrt()
            }
            ScheduleKind::Fvp => self.beta(t).sqrt(),
            ScheduleKind::SubFvp => {
                let b = self.beta_integral(t);
                (self.beta(t) * -(-T::of(2.0) * b).exp_m1()).sqrt()
            }
            ScheduleKind::Linear => t,
        }
    }

    /// c(t) = exp(∫₀^t μ), without range checks.
    pub fn c(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::Fvp | ScheduleKind::SubFvp => (-T::of(0.5) * self.beta_integral(t)).exp(),
            ScheduleKind::Fve | ScheduleKind::Linear => T::one(),
        }
    }

    pub fn drift_mu(&self, t: T) -> Result<T> {
        self.check_time(t)?;
        Ok(self.mu(t))
    }

    pub fn diffusion_sigma(&self, t: T) -> Result<T> {
        self.check_time(t)?;
        Ok(self.sigma(t))
    }

    pub fn drift_integral_c(&self, t: T) -> Result<T> {
        self.check_time(t)?;
        Ok(self.c(t))
    }

    /// Terminal variance the normalisation aims for.
    pub fn target_variance(&self) -> T {
        match self.kind {
            ScheduleKind::Fve => self.sigma_max * self.sigma_max,
            _ => T::one(),
        }
    }
}

/// Returns `s` with `norm_factor = target_std / σ_T^{base}`, where `terminal_variance`
/// computes σ²_T of a candidate schedule (called once with norm_factor = 1).
pub fn normalize_terminal_variance<T: Scalar>(
    s: &Schedule<T>,
    terminal_variance: impl FnOnce(&Schedule<T>) -> Result<T>,
) -> Result<Schedule<T>> {
    let mut base = *s;
    base.norm_factor = T::one();
    let var = terminal_variance(&base)?;
    if !(var > T::zero() && var.is_finite()) {
        return Err(Error::Numerical(format!("base terminal variance is {var}")));
    }
    base.norm_factor = base.target_variance().sqrt() / var.sqrt();
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_examples() {
        let fve = Schedule::<f64>::new(ScheduleKind::Fve);
        let fvp = Schedule::<f64>::new(ScheduleKind::Fvp);
        let sub = Schedule::<f64>::new(ScheduleKind::SubFvp);
        assert_eq!(fve.drift_mu(0.3).unwrap(), 0.0);
        assert!((fvp.drift_mu(0.0).unwrap() + 0.05).abs() < 1e-15);
        assert!((fvp.drift_mu(1.0).unwrap() + 10.0).abs() < 1e-13);
        assert_eq!(sub.diffusion_sigma(0.0).unwrap(), 0.0);
        assert!((fvp.diffusion_sigma(0.0).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        let want = 50.0 * (2.0 * 5000f64.ln()).sqrt();
        assert!((fve.diffusion_sigma(1.0).unwrap() - want).abs() < 1e-11 * want);
        assert_eq!(fvp.drift_integral_c(0.0).unwrap(), 1.0);
        assert!((fvp.drift_integral_c(1.0).unwrap() - (-5.025f64).exp()).abs() < 1e-15);
        assert_eq!(fve.drift_integral_c(0.7).unwrap(), 1.0);
        assert!(fvp.drift_mu(1.5).is_err());
        assert!(fvp.diffusion_sigma(-0.1).is_err());
    }

    #[test]
    fn c_is_exponential_of_drift_integral() {
        let s = Schedule::<f64>::new(ScheduleKind::SubFvp);
        let n = 100_000;
        let h = 0.8 / n as f64;
        let integral: f64 = (0..n).map(|k| s.mu((k as f64 + 0.5) * h) * h).sum();
        assert!((s.c(0.8) - integral.exp()).abs() < 1e-10);
    }

    #[test]
    fn normalisation_targets() {
        let s = Schedule::<f64>::new(ScheduleKind::Fve);
        let n = normalize_terminal_variance(&s, |c| Ok(c.sigma(1.0).powi(2))).unwrap();
        assert!((n.norm_factor - 50.0 / s.sigma(1.0)).abs() < 1e-12);
        assert!(normalize_terminal_variance(&s, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SubFVP".parse::<ScheduleKind>().unwrap(), ScheduleKind::SubFvp);
        assert_eq!("sub-fvp".parse::<ScheduleKind>().unwrap(), ScheduleKind::SubFvp);
        assert!("cosine".parse::<ScheduleKind>().is_err());
        for k in [ScheduleKind::Fve, ScheduleKind::Fvp, ScheduleKind::SubFvp, ScheduleKind::Linear] {
            assert_eq!(ScheduleKind::from_code(k.code()), Some(k));
            assert_eq!(k.to_string().parse::<ScheduleKind>().unwrap(), k);
        }
    }
}
