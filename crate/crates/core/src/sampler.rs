//! Reverse-time sampling of the coupled (X, Y, Z) system.
//!
//! Forward-time drift of chain state V at time t:
//! X: μX − σS − fac_x·Σ r_i φ_i, Y^i: −x_i Y^i − fac_y·φ_i, Z^i: −x_i Z^i + Y^i,
//! where r_i = q_iσ for H < 1/2 (0 otherwise) is the X-part of the shared noise and
//! φ_i is the component score along (r_i, 1). A reverse step is V ← V − D·h + noise.

use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView2};

use crate::error::{invalid, Error, Result};
use crate::linalg::sym_eigen;
use crate::rng::{normal, substream, Rng};
use crate::scalar::Scalar;
use crate::score::ScoreFn;
use crate::tables::KernelTables;

/// Chains get RNG streams `CHAIN_STREAM + chain`.
const CHAIN_STREAM: u64 = 1 << 32;
/// Rows per score evaluation block (also the unit of parallel work).
const SCORE_BLOCK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sde,
    /// X by SDE, Y by probability flow.
    GSde,
    /// X by probability flow, Y by SDE.
    NOde,
    Ode,
}

impl Method {
    /// (fac_x, fac_y, noise_x, noise_y)
    pub fn step_kind(self) -> StepKind {
        let (sde_x, sde_y) = match self {
            Method::Sde => (true, true),
            Method::GSde => (true, false),
            Method::NOde => (false, true),
            Method::Ode => (false, false),
        };
        let fac = |sde: bool| if sde { 1.0 } else { 0.5 };
        StepKind { fac_x: fac(sde_x), fac_y: fac(sde_y), noise_x: sde_x, noise_y: sde_y }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sde => "SDE",
            Method::GSde => "gSDE",
            Method::NOde => "nODE",
            Method::Ode => "ODE",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sde" => Ok(Method::Sde),
            "gsde" => Ok(Method::GSde),
            "node" => Ok(Method::NOde),
            "ode" => Ok(Method::Ode),
            _ => Err(Error::Config(format!("unknown method `{s}` (SDE | gSDE | nODE | ODE)"))),
        }
    }
}

/// How the single marginal score is turned into per-component scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Pointwise rescaling of ∇_x log p by the component statistics.
    Rescaled,
    /// Exact projected joint score for Gaussian kernels with a Tweedie denoiser.
    /// Only numerically usable for small grids (m ≲ 16).
    Joint,
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Coupling::Rescaled => "rescaled",
            Coupling::Joint => "joint",
        })
    }
}

impl std::str::FromStr for Coupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rescaled" => Ok(Coupling::Rescaled),
            "joint" => Ok(Coupling::Joint),
            _ => Err(Error::Config(format!("unknown coupling `{s}` (rescaled | joint)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepKind {
    pub fac_x: f64,
    pub fac_y: f64,
    pub noise_x: bool,
    pub noise_y: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub t_end: f64,
    pub coupling: Coupling,
    pub threads: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Sde,
            n_steps: 1000,
            n_samples: 1000,
            seed: 0,
            t_end: 1e-3,
            coupling: Coupling::Rescaled,
            threads: 1,
        }
    }
}

/// A batch of reverse chains at forward time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseState<T> {
    /// `(n, d)`
    pub x: Array2<T>,
    /// `(n, m, d)`
    pub y: Array3<T>,
    /// `(n, m, d)` for H > 1/2, `(n, 0, d)` otherwise.
    pub z: Array3<T>,
    pub t: T,
}

impl<T: Scalar> ReverseState<T> {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// S^H with forward X drift μX − σS^H: Σ q_i x_i Y^i (H < 1/2) or Σ q_i (x_i Z^i − Y^i).
    pub fn s_h(&self, tables: &KernelTables<T>) -> Array2<T> {
        let g = &tables.grid;
        let smooth = g.hurst.is_smooth();
        let mut out = Array2::zeros(self.x.raw_dim());
        for r in 0..self.n() {
            for i in 0..g.m {
                for j in 0..self.dim() {
                    out[[r, j]] += if smooth {
                        g.q[i] * (g.x[i] * self.z[[r, i, j]] - self.y[[r, i, j]])
                    } else {
                        g.q[i] * g.x[i] * self.y[[r, i, j]]
                    };
                }
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).chain(self.z.iter()).all(|v| v.is_finite())
    }
}

/// One RNG per chain.
pub fn chain_rngs(seed: u64, n: usize) -> Vec<Rng> {
    (0..n as u64).map(|r| substream(seed, CHAIN_STREAM + r)).collect()
}

/// Shared-ξ start: x = σ_T ξ, y_i = τ_{T,i} ξ, z_i = τ̃_{T,i} ξ.
pub fn init_reverse_state<T: Scalar>(tables: &KernelTables<T>, dim: usize, rngs: &mut [Rng]) -> ReverseState<T> {
    let t = tables.horizon();
    let g = &tables.grid;
    let two = T::of(2.0);
    let sig = tables.sigma_at(t);
    let tau: Vec<T> = g.x.iter().map(|&x| crate::scalar::exp_moment(0, two * x, t).sqrt()).collect();
    let m_z = if g.hurst.is_smooth() { g.m } else { 0 };
    let tau_z: Vec<T> = g.x.iter().map(|&x| crate::scalar::exp_moment(2, two * x, t).sqrt()).collect();
    let n = rngs.len();
    let mut st = ReverseState {
        x: Array2::zeros((n, dim)),
        y: Array3::zeros((n, g.m, dim)),
        z: Array3::zeros((n, m_z, dim)),
        t,
    };
    for (r, rng) in rngs.iter_mut().enumerate() {
        for j in 0..dim {
            let xi: T = normal(rng);
            st.x[[r, j]] = sig * xi;
            for i in 0..g.m {
                st.y[[r, i, j]] = tau[i] * xi;
            }
            for i in 0..m_z {
                st.z[[r, i, j]] = tau_z[i] * xi;
            }
        }
    }
    st
}

/// Per-component factors (σ_t/((1+ρ_i)σ_{t,i}), σ_t/((1+ρ_i)τ_{t,i})) at time t.
pub fn rescale_factors<T: Scalar>(tables: &KernelTables<T>, t: T) -> Result<Vec<(T, T)>> {
    let st = tables.stats_at(t);
    let sigma = st.sigma2.max(T::zero()).sqrt();
    (0..tables.m())
        .map(|i| {
            let one_rho = T::one() + st.rho_i[i];
            if one_rho <= T::of(1e-6) {
                return Err(Error::Numerical(format!(
                    "near-singular score rescaling: 1 + rho_{i} = {one_rho} at t = {t}"
                )));
            }
            let (si, ti) = (st.sigma2_i[i].sqrt(), st.tau2_i[i].sqrt());
            if !(si > T::zero() && ti > T::zero()) {
                return Err(Error::Numerical(format!("degenerate component {i} at t = {t}")));
            }
            if st.rho_i[i] < T::zero() {
                log::warn!("negative component correlation rho_{i} = {} at t = {t}", st.rho_i[i]);
            }
            Ok((sigma / (one_rho * si), sigma / (one_rho * ti)))
        })
        .collect()
}

/// Rescaled (x, y) component scores of node `i` from an estimate of ∇_x log p(x, t).
pub fn rescaled_component_scores<T: Scalar>(
    tables: &KernelTables<T>,
    i: usize,
    t: T,
    score: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    if i >= tables.m() {
        return invalid(format!("component index {i} out of range (m = {})", tables.m()));
    }
    if !(t > T::zero() && t <= tables.horizon()) {
        return invalid(format!("time {t} outside (0, {}]", tables.horizon()));
    }
    let (fx, fy) = rescale_factors(tables, t)?[i];
    Ok((score.iter().map(|&s| fx * s).collect(), score.iter().map(|&s| fy * s).collect()))
}

/// Score coefficients resolved for one time.
enum Coeffs<T> {
    /// φ_i = a_i·score
    Rescaled(Vec<T>),
    Joint(JointCoeffs<T>),
}

/// Γ = −bᵀV + κ·x̂0(u), u = wᵀV/λ.
struct JointCoeffs<T> {
    b: Vec<T>,
    w: Vec<T>,
    kappa: T,
    t_match: T,
}

/// Noise loading of the X coordinate on each node: q_iσ(t) (H < 1/2) or 0.
fn x_loading<T: Scalar>(tables: &KernelTables<T>, t: T) -> Vec<T> {
    let g = &tables.grid;
    if g.hurst.is_smooth() {
        vec![T::zero(); g.m]
    } else {
        let sig = tables.schedule.sigma(t);
        g.q.iter().map(|&q| q * sig).collect()
    }
}

/// Pseudo-inverse applied to vectors through an eigen-decomposition (relative cut 1e−12).
fn pinv_apply<T: Scalar>(cov: &[T], n: usize, rhs: &[&[f64]]) -> Vec<Vec<f64>> {
    let eig = sym_eigen(cov, n);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    rhs.iter()
        .map(|v| {
            let mut out = vec![0.0; n];
            for k in 0..n {
                let lam = eig.eigenvalues[k];
                if lam <= 1e-12 * top {
                    continue;
                }
                let col = eig.eigenvectors.column(k);
                let proj: f64 = (0..n).map(|a| col[a] * v[a]).sum::<f64>() / lam;
                for a in 0..n {
                    out[a] += proj * col[a];
                }
            }
            out
        })
        .collect()
}

fn joint_noise_vector<T: Scalar>(tables: &KernelTables<T>, t: T) -> Vec<f64> {
    let m = tables.m();
    let n = if tables.hurst.is_smooth() { 2 * m + 1 } else { m + 1 };
    let mut r = vec![0.0; n];
    r[0] = (tables.grid.c_h() * tables.schedule.sigma(t)).f64();
    r[1..=m].iter_mut().for_each(|v| *v = 1.0);
    r
}

fn coefficients<T: Scalar>(tables: &KernelTables<T>, t: T, coupling: Coupling) -> Result<Coeffs<T>> {
    let g = &tables.grid;
    match coupling {
        Coupling::Rescaled => {
            if g.m == 1 && g.x[0] == T::zero() {
                // Brownian case: the OU layer is the driving noise itself, no coupling.
                return Ok(Coeffs::Rescaled(vec![tables.schedule.sigma(t)]));
            }
            let load = x_loading(tables, t);
            let f = rescale_factors(tables, t)?;
            Ok(Coeffs::Rescaled(f.iter().zip(&load).map(|(&(fx, fy), &r)| r * fx + fy).collect()))
        }
        Coupling::Joint => {
            let cov = tables.joint_covariance(t);
            let rvec = joint_noise_vector(tables, t);
            let n = rvec.len();
            let mut a = vec![0.0; n];
            a[0] = tables.schedule.c(t).f64();
            let sol = pinv_apply(&cov, n, &[&rvec, &a]);
            let (b, w) = (&sol[0], &sol[1]);
            let lambda: f64 = a.iter().zip(w).map(|(x, y)| x * y).sum();
            if !(lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::Numerical(format!("joint covariance lost the data direction at t = {t}")));
            }
            let kappa: f64 = rvec.iter().zip(w).map(|(x, y)| x * y).sum();
            let t_match = tables.time_for_noise_ratio(T::of(1.0 / lambda)).max(tables.times[1]);
            Ok(Coeffs::Joint(JointCoeffs {
                b: b.iter().map(|&v| T::of(v)).collect(),
                w: w.iter().map(|&v| T::of(v / lambda)).collect(),
                kappa: T::of(kappa),
                t_match,
            }))
        }
    }
}

/// Evaluates the score in fixed-size row blocks, optionally on a thread pool.
fn eval_score<T: Scalar>(
    score: &dyn ScoreFn<T>,
    x: ArrayView2<T>,
    t: T,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Array2<T>> {
    let n = x.nrows();
    let blocks: Vec<(usize, usize)> = (0..n).step_by(SCORE_BLOCK).map(|a| (a, (a + SCORE_BLOCK).min(n))).collect();
    let run = |&(a, b): &(usize, usize)| score.score(x.slice(s![a..b, ..]), t);
    let parts: Vec<Result<Array2<T>>> = match pool {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            blocks.par_iter().map(run).collect()
        }),
        None => blocks.iter().map(run).collect(),
    };
    let mut out = Array2::zeros(x.raw_dim());
    for (&(a, b), part) in blocks.iter().zip(parts) {
        let part = part?;
        if part.dim() != (b - a, x.ncols()) {
            return invalid("score function returned a wrongly shaped batch");
        }
        out.slice_mut(s![a..b, ..]).assign(&part);
    }
    Ok(out)
}

/// Drift of every chain at the state's time.
pub struct Drift<T> {
    pub x: Array2<T>,
    pub y: Array3<T>,
    pub z: Array3<T>,
}

fn check_learned<T: Scalar>(tables: &KernelTables<T>, score: &dyn ScoreFn<T>) -> Result<()> {
    if score.is_learned() && tables.hurst.is_smooth() {
        return Err(Error::Unsupported(
            "learned-score sampling is restricted to H <= 1/2 (no score rescaling exists for H > 1/2)".into(),
        ));
    }
    Ok(())
}

fn drift_with<T: Scalar>(
    state: &ReverseState<T>,
    tables: &KernelTables<T>,
    score: &dyn ScoreFn<T>,
    coupling: Coupling,
    kind: StepKind,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Drift<T>> {
    check_learned(tables, score)?;
    let t = state.t;
    let g = &tables.grid;
    let (n, d, m) = (state.n(), state.dim(), g.m);
    let (fx, fy) = (T::of(kind.fac_x), T::of(kind.fac_y));
    let load = x_loading(tables, t);
    let mu = tables.schedule.mu(t);
    let sig = tables.schedule.sigma(t);
    let s_h = state.s_h(tables);

    // φ[r, i, j]
    let mut phi = Array3::<T>::zeros((n, m, d));
    match coefficients(tables, t, coupling)? {
        Coeffs::Rescaled(a) => {
            let sc = eval_score(score, state.x.view(), t, pool)?;
            for r in 0..n {
                for i in 0..m {
                    for j in 0..d {
                        phi[[r, i, j]] = a[i] * sc[[r, j]];
                    }
                }
            }
        }
        Coeffs::Joint(jc) => {
            let dot = |coef: &[T], r: usize, j: usize| {
                let mut acc = coef[0] * state.x[[r, j]];
                for i in 0..m {
                    acc += coef[1 + i] * state.y[[r, i, j]];
                }
                for i in 0..state.z.shape()[1] {
                    acc += coef[1 + m + i] * state.z[[r, i, j]];
                }
                acc
            };
            let u = Array2::from_shape_fn((n, d), |(r, j)| dot(&jc.w, r, j));
            let c_m = tables.schedule.c(jc.t_match);
            let sc = eval_score(score, (&u * c_m).view(), jc.t_match, pool)?;
            let shrink = tables.sigma2_at(jc.t_match) / c_m;
            for r in 0..n {
                for j in 0..d {
                    let x0_hat = u[[r, j]] + shrink * sc[[r, j]];
                    let gamma = -dot(&jc.b, r, j) + jc.kappa * x0_hat;
                    for i in 0..m {
                        phi[[r, i, j]] = gamma;
                    }
                }
            }
        }
    }

    let mut dx = Array2::zeros((n, d));
    let mut dy = Array3::zeros((n, m, d));
    let mut dz = Array3::zeros(state.z.raw_dim());
    for r in 0..n {
        for j in 0..d {
            let mut corr = T::zero();
            for i in 0..m {
                corr += load[i] * phi[[r, i, j]];
                dy[[r, i, j]] = -g.x[i] * state.y[[r, i, j]] - fy * phi[[r, i, j]];
            }
            dx[[r, j]] = mu * state.x[[r, j]] - sig * s_h[[r, j]] - fx * corr;
            for i in 0..state.z.shape()[1] {
                dz[[r, i, j]] = -g.x[i] * state.z[[r, i, j]] + state.y[[r, i, j]];
            }
        }
    }
    Ok(Drift { x: dx, y: dy, z: dz })
}

/// Forward-time drift of the reverse dynamics for a given method.
pub fn reverse_drift<T: Scalar>(
    state: &ReverseState<T>,
    tables: &KernelTables<T>,
    score: &dyn ScoreFn<T>,
    coupling: Coupling,
    method: Method,
) -> Result<Drift<T>> {
    drift_with(state, tables, score, coupling, method.step_kind(), None)
}

/// One reverse step of size `h` (forward time decreases by h).
/// A single standard normal per (chain, coordinate) drives X (scaled C_Hσ) and every Y^i.
pub fn reverse_step<T: Scalar>(
    state: &mut ReverseState<T>,
    tables: &KernelTables<T>,
    score: &dyn ScoreFn<T>,
    coupling: Coupling,
    kind: StepKind,
    h: T,
    rngs: &mut [Rng],
) -> Result<()> {
    step_inner(state, tables, score, coupling, kind, h, rngs, None)
}

#[allow(clippy::too_many_arguments)]
fn step_inner<T: Scalar>(
    state: &mut ReverseState<T>,
    tables: &KernelTables<T>,
    score: &dyn ScoreFn<T>,
    coupling: Coupling,
    kind: StepKind,
    h: T,
    rngs: &mut [Rng],
    pool: Option<&rayon::ThreadPool>,
) -> Result<()> {
    if rngs.len() != state.n() {
        return invalid("one RNG per chain is required");
    }
    let drift = drift_with(state, tables, score, coupling, kind, pool)?;
    let sq = h.sqrt();
    let gx = tables.grid.c_h() * tables.schedule.sigma(state.t) * sq;
    let (m, d) = (tables.m(), state.dim());
    for (r, rng) in rngs.iter_mut().enumerate() {
        for j in 0..d {
            let zeta: T = normal(rng);
            state.x[[r, j]] -= h * drift.x[[r, j]];
            if kind.noise_x {
                state.x[[r, j]] += gx * zeta;
            }
            for i in 0..m {
                state.y[[r, i, j]] -= h * drift.y[[r, i, j]];
                if kind.noise_y {
                    state.y[[r, i, j]] += sq * zeta;
                }
            }
            for i in 0..state.z.shape()[1] {
                state.z[[r, i, j]] -= h * drift.z[[r, i, j]];
            }
        }
    }
    state.t -= h;
    Ok(())
}

/// Joint-coupling start: V_T ~ N(0, Σ_T + c_T² e₀e₀ᵀ) per coordinate (unit-variance data).
fn init_joint<T: Scalar>(tables: &KernelTables<T>, dim: usize, rngs: &mut [Rng]) -> ReverseState<T> {
    let t = tables.horizon();
    let m = tables.m();
    let m_z = if tables.hurst.is_smooth() { m } else { 0 };
    let n = 1 + m + m_z;
    let mut cov = tables.joint_covariance(t);
    let c = tables.schedule.c(t);
    cov[0] += c * c;
    let eig = sym_eigen(&cov, n);
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut st = ReverseState {
        x: Array2::zeros((rngs.len(), dim)),
        y: Array3::zeros((rngs.len(), m, dim)),
        z: Array3::zeros((rngs.len(), m_z, dim)),
        t,
    };
    for (r, rng) in rngs.iter_mut().enumerate() {
        for j in 0..dim {
            let zeta: Vec<f64> = (0..n).map(|_| normal::<f64>(rng)).collect();
            let v: Vec<f64> = (0..n)
                .map(|a| (0..n).map(|k| eig.eigenvectors[(a, k)] * roots[k] * zeta[k]).sum())
                .collect();
            st.x[[r, j]] = T::of(v[0]);
            for i in 0..m {
                st.y[[r, i, j]] = T::of(v[1 + i]);
            }
            for i in 0..m_z {
                st.z[[r, i, j]] = T::of(v[1 + m + i]);
            }
        }
    }
    st
}

pub fn validate_method<T: Scalar>(tables: &KernelTables<T>, method: Method) -> Result<()> {
    let brownian = tables.hurst.value() == T::of(0.5);
    if brownian && matches!(method, Method::GSde | Method::NOde) {
        return Err(Error::Unsupported(format!(
            "{method} is undefined at H = 0.5 (the OU layer is the driving Brownian motion); use SDE or ODE"
        )));
    }
    Ok(())
}

/// Runs `config.n_samples` reverse chains from T to `t_end` and returns the X states
/// (standardised data units).
pub fn sample<T: Scalar>(tables: &KernelTables<T>, score: &dyn ScoreFn<T>, dim: usize, config: &SamplerConfig) -> Result<Array2<T>> {
    validate_method(tables, config.method)?;
    check_learned(tables, score)?;
    let horizon = tables.horizon().f64();
    if config.n_steps == 0 || config.n_samples == 0 || dim == 0 {
        return invalid("n_steps, n_samples and the data dimension must be positive");
    }
    if !(config.t_end > 0.0 && config.t_end < horizon) {
        return invalid(format!("t_end must lie in (0, {horizon})"));
    }
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let mut rngs = chain_rngs(config.seed, config.n_samples);
    let mut state = match config.coupling {
        Coupling::Rescaled => init_reverse_state(tables, dim, &mut rngs),
        Coupling::Joint => init_joint(tables, dim, &mut rngs),
    };
    let h = T::of((horizon - config.t_end) / config.n_steps as f64);
    let kind = config.method.step_kind();
    for k in 0..config.n_steps {
        step_inner(&mut state, tables, score, config.coupling, kind, h, &mut rngs, pool.as_ref())?;
        if !state.is_finite() {
            return Err(Error::Numerical(format!(
                "reverse chain became non-finite at step {} of {} (t = {})",
                k + 1,
                config.n_steps,
                state.t
            )));
        }
    }
    Ok(state.x)
}
