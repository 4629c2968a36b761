//! Space grid of mean-reversion speeds and weights for the finite OU approximation of fBM.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{exp_moment, Scalar};

/// Roughness class of a Hurst index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Roughness {
    Rough,
    Brownian,
    Smooth,
}

/// Hurst index in the open unit interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HurstIndex<T>(T);

impl<T: Scalar> HurstIndex<T> {
    pub fn new(value: T) -> Result<Self> {
        if !(value > T::zero() && value < T::one()) {
            return invalid(format!("Hurst index must lie in (0,1), got {value}"));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> T {
        self.0
    }

    pub fn class(self) -> Roughness {
        let half = T::of(0.5);
        if self.0 < half {
            Roughness::Rough
        } else if self.0 > half {
            Roughness::Smooth
        } else {
            Roughness::Brownian
        }
    }

    pub fn is_smooth(self) -> bool {
        self.class() == Roughness::Smooth
    }
}

/// η_j = r^{j - m/2}, j = 0..=m.
pub fn build_geometric_grid<T: Scalar>(m: usize, r: T) -> Result<Vec<T>> {
    if m < 2 || m % 2 != 0 {
        return invalid(format!("grid size m must be even and >= 2, got {m}"));
    }
    if !(r > T::one() && r < T::of(2.0)) {
        return invalid(format!("geometric ratio r must lie in (1,2), got {r}"));
    }
    let half = (m / 2) as i32;
    Ok((0..=m as i32).map(|j| r.powi(j - half)).collect())
}

/// Exponent p and density normaliser for ν restricted to one interval.
fn density_params<T: Scalar>(h: HurstIndex<T>) -> (T, T) {
    let hv = h.value().f64();
    let (p, norm) = if hv < 0.5 {
        (0.5 - hv, libm::tgamma(hv + 0.5) * libm::tgamma(0.5 - hv))
    } else {
        (1.5 - hv, libm::tgamma(hv + 0.5) * libm::tgamma(1.5 - hv))
    };
    (T::of(p), T::of(norm))
}

/// Mean speed and mass of ν over `[eta_lo, eta_hi]`.
///
/// ν has density x^{-(1/2+H)}/(Γ(H+1/2)Γ(1/2-H)) for H < 1/2 and
/// x^{1/2-H}/(Γ(H+1/2)Γ(3/2-H)) for H > 1/2.
pub fn node_and_weight<T: Scalar>(h: HurstIndex<T>, eta_lo: T, eta_hi: T) -> Result<(T, T)> {
    if h.class() == Roughness::Brownian {
        return invalid("node_and_weight is undefined at H = 0.5");
    }
    if !(eta_lo > T::zero() && eta_hi > eta_lo) {
        return invalid(format!("interval must satisfy 0 < lo < hi, got ({eta_lo}, {eta_hi})"));
    }
    let (p, norm) = density_params(h);
    let p1 = p + T::one();
    let d0 = eta_hi.powf(p) - eta_lo.powf(p);
    let d1 = eta_hi.powf(p1) - eta_lo.powf(p1);
    let q_raw = d0 / (p * norm);
    let x = p / p1 * d1 / d0;
    Ok((x, q_raw))
}

/// Finite space grid: speeds `x`, raw weights `q_raw` and rescaled weights `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceGrid<T> {
    pub hurst: HurstIndex<T>,
    pub m: usize,
    pub r: T,
    pub eta: Vec<T>,
    pub x: Vec<T>,
    pub q_raw: Vec<T>,
    pub q: Vec<T>,
    pub rescale_a: T,
    pub horizon: T,
}

impl<T: Scalar> SpaceGrid<T> {
    pub const DEFAULT_M: usize = 40;
    pub const DEFAULT_R: f64 = 1.35;

    /// Builds the grid and rescales the weights so that Var[W^{H,m}_horizon] = 1.
    /// At H = 0.5 `m` and `r` are ignored.
    pub fn build(h: HurstIndex<T>, m: usize, r: T, horizon: T) -> Result<Self> {
        if !(horizon > T::zero()) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if h.class() == Roughness::Brownian {
            return Ok(Self {
                hurst: h,
                m: 1,
                r,
                eta: Vec::new(),
                x: vec![T::zero()],
                q_raw: vec![T::one()],
                q: vec![T::one()],
                rescale_a: T::one(),
                horizon,
            });
        }
        let eta = build_geometric_grid(m, r)?;
        let mut x = Vec::with_capacity(m);
        let mut q_raw = Vec::with_capacity(m);
        for w in eta.windows(2) {
            let (xi, qi) = node_and_weight(h, w[0], w[1])?;
            x.push(xi);
            q_raw.push(qi);
        }
        let var = kernel_covariance(h, &x, &q_raw, horizon, horizon);
        if !(var.is_finite() && var > T::zero()) {
            return Err(Error::Numerical(format!("terminal variance of the raw grid is {var}")));
        }
        let rescale_a = var.sqrt();
        let q = q_raw.iter().map(|&v| v / rescale_a).collect();
        Ok(Self { hurst: h, m, r, eta, x, q_raw, q, rescale_a, horizon })
    }

    pub fn with_defaults(h: HurstIndex<T>, horizon: T) -> Result<Self> {
        Self::build(h, Self::DEFAULT_M, T::of(Self::DEFAULT_R), horizon)
    }

    /// C_H = Σ q_i for H ≤ 1/2, 0 otherwise.
    pub fn c_h(&self) -> T {
        if self.hurst.is_smooth() {
            T::zero()
        } else {
            self.q.iter().copied().sum()
        }
    }

    pub fn x_max(&self) -> T {
        self.x.iter().copied().fold(T::zero(), T::max)
    }

    /// K(t,s) with the rescaled weights.
    pub fn kernel(&self, t: T, s: T) -> T {
        let d = t - s;
        let smooth = self.hurst.is_smooth();
        self.x
            .iter()
            .zip(&self.q)
            .map(|(&x, &q)| {
                let e = q * (-x * d).exp();
                if smooth {
                    e * d
                } else {
                    e
                }
            })
            .sum()
    }

    /// ∫₀^s K(s,u) K(t,u) du for s ≤ t with the rescaled weights.
    pub fn covariance(&self, s: T, t: T) -> T {
        kernel_covariance(self.hurst, &self.x, &self.q, s, t)
    }

    /// Serialisable snapshot with f64 fields.
    pub fn to_doc(&self) -> SpaceGridDoc {
        let v = |a: &[T]| a.iter().map(|x| x.f64()).collect();
        SpaceGridDoc {
            h: self.hurst.value().f64(),
            m: self.m,
            r: self.r.f64(),
            eta: v(&self.eta),
            x: v(&self.x),
            q_raw: v(&self.q_raw),
            q: v(&self.q),
            rescale_a: self.rescale_a.f64(),
            horizon_t: self.horizon.f64(),
        }
    }

    pub fn from_doc(doc: &SpaceGridDoc) -> Result<Self> {
        let v = |a: &[f64]| a.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let grid = Self {
            hurst: HurstIndex::new(T::of(doc.h))?,
            m: doc.m,
            r: T::of(doc.r),
            eta: v(&doc.eta),
            x: v(&doc.x),
            q_raw: v(&doc.q_raw),
            q: v(&doc.q),
            rescale_a: T::of(doc.rescale_a),
            horizon: T::of(doc.horizon_t),
        };
        if grid.x.len() != grid.m || grid.q.len() != grid.m || grid.q_raw.len() != grid.m {
            return invalid("space grid document has inconsistent array lengths");
        }
        Ok(grid)
    }

    /// Structured text form (`key = value` lines).
    pub fn to_text(&self) -> String {
        toml::to_string(&self.to_doc()).expect("plain numeric document")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: SpaceGridDoc =
            toml::from_str(text).map_err(|e| Error::Config(format!("space grid: {e}")))?;
        Self::from_doc(&doc)
    }
}

/// Plain-data mirror of [`SpaceGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceGridDoc {
    pub h: f64,
    pub m: usize,
    pub r: f64,
    pub eta: Vec<f64>,
    pub x: Vec<f64>,
    pub q_raw: Vec<f64>,
    pub q: Vec<f64>,
    pub rescale_a: f64,
    pub horizon_t: f64,
}

/// Closed form of ∫₀^s K(s,u)K(t,u) du for weights `q`, 0 ≤ s ≤ t.
pub fn kernel_covariance<T: Scalar>(h: HurstIndex<T>, x: &[T], q: &[T], s: T, t: T) -> T {
    let delta = t - s;
    let smooth = h.is_smooth();
    let mut acc = T::zero();
    for (&xi, &qi) in x.iter().zip(q) {
        for (&xk, &qk) in x.iter().zip(q) {
            let a = xi + xk;
            let shift = (-xk * delta).exp();
            let inner = if smooth {
                exp_moment(2, a, s) + delta * exp_moment(1, a, s)
            } else {
                exp_moment(0, a, s)
            };
            acc += qi * qk * shift * inner;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hurst(v: f64) -> HurstIndex<f64> {
        HurstIndex::new(v).unwrap()
    }

    #[test]
    fn geometric_grid_examples() {
        let g = build_geometric_grid(4, 1.35f64).unwrap();
        let want = [1.35f64.powi(-2), 1.35f64.powi(-1), 1.0, 1.35, 1.35f64.powi(2)];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let g = build_geometric_grid(2, 1.5f64).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15 && g[1] == 1.0 && g[2] == 1.5);
        assert!(build_geometric_grid(3, 1.35f64).is_err());
        assert!(build_geometric_grid(4, 2.0f64).is_err());
        assert!(build_geometric_grid(4, 1.0f64).is_err());
    }

    #[test]
    fn hurst_classes() {
        assert_eq!(hurst(0.1).class(), Roughness::Rough);
        assert_eq!(hurst(0.5).class(), Roughness::Brownian);
        assert_eq!(hurst(0.9).class(), Roughness::Smooth);
        assert!(HurstIndex::new(0.0f64).is_err());
        assert!(HurstIndex::new(1.0f64).is_err());
        assert!(HurstIndex::new(f64::NAN).is_err());
    }

    #[test]
    fn node_weight_rejects_bad_input() {
        assert!(node_and_weight(hurst(0.5), 1.0, 2.0).is_err());
        assert!(node_and_weight(hurst(0.3), 2.0, 1.0).is_err());
        assert!(node_and_weight(hurst(0.3), 0.0, 1.0).is_err());
    }

    #[test]
    fn brownian_grid_is_degenerate() {
        let g = SpaceGrid::build(hurst(0.5), 40, 1.35, 1.0).unwrap();
        assert_eq!((g.m, g.x.clone(), g.q.clone()), (1, vec![0.0], vec![1.0]));
        assert_eq!(g.covariance(0.3, 0.7), 0.3);
    }

    #[test]
    fn text_round_trip() {
        let g = SpaceGrid::build(hurst(0.25), 8, 1.5, 1.0).unwrap();
        let back = SpaceGrid::<f64>::from_text(&g.to_text()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn f32_grid_tracks_f64() {
        let g64 = SpaceGrid::build(hurst(0.25), 40, 1.35, 1.0).unwrap();
        let g32 = SpaceGrid::build(HurstIndex::new(0.25f32).unwrap(), 40, 1.35, 1.0).unwrap();
        for (a, b) in g64.q.iter().zip(&g32.q) {
            assert!((a - *b as f64).abs() < 1e-4 * a.abs());
        }
        assert!((g32.covariance(1.0, 1.0) - 1.0).abs() < 1e-4);
    }
}
