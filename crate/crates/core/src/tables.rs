//! Forward perturbation kernel α(t,s) and the marginal/component statistics derived from it.
//!
//! σ(u)/c(u) is taken piecewise linear on a uniform inner grid of K cells and the
//! exponential factors e^{-x_i(u-s)} are integrated exactly per cell. Integrals over s
//! use a backward recursion from s = t, so no growing exponentials appear.

use crate::error::{invalid, Error, Result};
use crate::grid::{HurstIndex, SpaceGrid};
use crate::scalar::{exp_moment, unit_moment, Scalar};
use crate::schedule::{normalize_terminal_variance, Schedule};

/// Inner quadrature grid and output lattice sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableSpec {
    pub inner_steps: usize,
    pub output_steps: usize,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self { inner_steps: 10_000, output_steps: 1_000 }
    }
}

impl TableSpec {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps < 1_000 || self.output_steps == 0 {
            return invalid("table spec needs inner_steps >= 1000 and output_steps >= 1");
        }
        if self.inner_steps % self.output_steps != 0 {
            return invalid("inner_steps must be a multiple of output_steps");
        }
        Ok(())
    }
}

/// Per-node constants of the cell recursion for one cell width.
#[derive(Clone, Copy, Debug)]
struct Cell<T> {
    x: T,
    q: T,
    decay: T,
    z: T,
    m0: T,
    m1_h: T,
    jc0: T,
    jc1: T,
}

impl<T: Scalar> Cell<T> {
    fn new(x: T, q: T, h: T) -> Self {
        let z = x * h;
        let decay = (-z).exp();
        let m1 = unit_moment(1, z);
        Self {
            x,
            q,
            decay,
            z,
            m0: h * unit_moment(0, z),
            m1_h: h * m1,
            // ∫₀^h (xv - 1) e^{-xv} dv = -h e^{-z}
            jc0: -h * decay,
            // (1/h) ∫₀^h v (xv - 1) e^{-xv} dv = h (m1(z) - e^{-z})
            jc1: h * (m1 - decay),
        }
    }

    /// Moves (P, J) from the cell's upper end to its lower end, g linear from `ga` to `gb`.
    ///
    /// P(s) = ∫_s^t g e^{-x(u-s)} du, J(s) = ∫_s^t g e^{-x(u-s)} [x(u-s) - 1] du.
    #[inline(always)]
    fn step(&self, ga: T, gb: T, p: T, j: T, smooth: bool) -> (T, T) {
        let b = gb - ga;
        let p_new = ga * self.m0 + b * self.m1_h + self.decay * p;
        if !smooth {
            return (p_new, j);
        }
        let j_new = ga * self.jc0 + b * self.jc1 + self.decay * (j + self.z * p);
        (p_new, j_new)
    }

    #[inline(always)]
    fn alpha(&self, g: T, p: T, j: T, smooth: bool) -> T {
        if smooth {
            -self.q * j
        } else {
            self.q * (g - self.x * p)
        }
    }
}

/// Simpson weights on `n` cells of width `h` (3/8 rule on the last three cells when `n` is odd).
fn quad_weight<T: Scalar>(j: usize, n: usize, h: T) -> T {
    fn simpson<T: Scalar>(j: usize, n: usize, h: T) -> T {
        if n == 0 || j > n {
            return T::zero();
        }
        let w = if j == 0 || j == n {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        h * T::of(w / 3.0)
    }
    match n {
        0 => T::zero(),
        1 => h * T::of(0.5),
        _ if n % 2 == 0 => simpson(j, n, h),
        _ => {
            let mut w = if j <= n - 3 { simpson(j, n - 3, h) } else { T::zero() };
            if j >= n - 3 {
                w += h * T::of([3.0, 9.0, 9.0, 3.0][j - (n - 3)] / 8.0);
            }
            w
        }
    }
}

/// Kernel statistics on the output lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTables<T> {
    pub hurst: HurstIndex<T>,
    pub schedule: Schedule<T>,
    pub grid: SpaceGrid<T>,
    pub spec: TableSpec,
    /// Output lattice, `output_steps + 1` points on [0, T].
    pub times: Vec<T>,
    pub c_vals: Vec<T>,
    pub sigma2: Vec<T>,
    /// `[node][time]`
    pub sigma2_i: Vec<Vec<T>>,
    pub tau2_i: Vec<Vec<T>>,
    /// Var Z^i (H > 1/2 only, empty otherwise).
    pub tau2_tilde_i: Vec<Vec<T>>,
    /// Cov(Y^i, Z^i) (H > 1/2 only).
    pub yz_i: Vec<Vec<T>>,
    /// Cov(X^i, Y^i)
    pub xcov_i: Vec<Vec<T>>,
    /// Cov(X^i, Z^i) (H > 1/2 only).
    pub xzcov_i: Vec<Vec<T>>,
    /// Cov(X, Y^k) of the full process.
    pub xy_total: Vec<Vec<T>>,
    /// Cov(X, Z^k) of the full process (H > 1/2 only).
    pub xz_total: Vec<Vec<T>>,
    pub rho_i: Vec<Vec<T>>,
    /// σ(u)/c(u) on the inner grid.
    pub g_inner: Vec<T>,
}

/// Interpolated statistics at one time.
#[derive(Clone, Debug)]
pub struct Stats<T> {
    pub t: T,
    pub c: T,
    pub sigma2: T,
    pub sigma2_i: Vec<T>,
    pub tau2_i: Vec<T>,
    pub xcov_i: Vec<T>,
    pub rho_i: Vec<T>,
}

impl<T: Scalar> KernelTables<T> {
    /// Builds the tables for an already-normalised schedule.
    pub fn build(schedule: &Schedule<T>, grid: &SpaceGrid<T>, spec: TableSpec) -> Result<Self> {
        spec.validate()?;
        schedule.validate()?;
        check_horizons(schedule, grid)?;
        let hurst = grid.hurst;
        let smooth = hurst.is_smooth();
        let m = grid.m;
        let k_in = spec.inner_steps;
        let n_out = spec.output_steps;
        let stride = k_in / n_out;
        let horizon = schedule.horizon;
        let h = horizon / T::of(k_in as f64);
        let g_inner: Vec<T> = (0..=k_in)
            .map(|j| {
                let u = h * T::of(j as f64);
                schedule.sigma(u) / schedule.c(u)
            })
            .collect();
        let cells: Vec<Cell<T>> = grid.x.iter().zip(&grid.q).map(|(&x, &q)| Cell::new(x, q, h)).collect();

        let zeros = || vec![vec![T::zero(); n_out + 1]; m];
        let maybe = || if smooth { zeros() } else { Vec::new() };
        let mut out = Self {
            hurst,
            schedule: *schedule,
            grid: grid.clone(),
            spec,
            times: (0..=n_out).map(|n| horizon * T::of(n as f64) / T::of(n_out as f64)).collect(),
            c_vals: vec![T::zero(); n_out + 1],
            sigma2: vec![T::zero(); n_out + 1],
            sigma2_i: zeros(),
            tau2_i: zeros(),
            tau2_tilde_i: maybe(),
            yz_i: maybe(),
            xcov_i: zeros(),
            xzcov_i: maybe(),
            xy_total: zeros(),
            xz_total: maybe(),
            rho_i: zeros(),
            g_inner,
        };

        let mut acc = Accum::new(m);
        for n in 0..=n_out {
            let t = out.times[n];
            let c = schedule.c(t);
            out.c_vals[n] = c;
            for i in 0..m {
                let x = grid.x[i];
                out.tau2_i[i][n] = exp_moment(0, T::of(2.0) * x, t);
                if smooth {
                    out.tau2_tilde_i[i][n] = exp_moment(2, T::of(2.0) * x, t);
                    out.yz_i[i][n] = exp_moment(1, T::of(2.0) * x, t);
                }
            }
            if n == 0 {
                continue;
            }
            sweep(&cells, &out.g_inner, n * stride, h, smooth, &mut acc);
            if !acc.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite kernel integral at t = {t}")));
            }
            out.sigma2[n] = c * c * acc.total;
            for i in 0..m {
                out.sigma2_i[i][n] = c * c * acc.comp[i];
                out.xcov_i[i][n] = c * acc.xy_comp[i];
                out.xy_total[i][n] = c * acc.xy[i];
                if smooth {
                    out.xzcov_i[i][n] = c * acc.xz_comp[i];
                    out.xz_total[i][n] = c * acc.xz[i];
                }
                let den = (out.sigma2_i[i][n] * out.tau2_i[i][n]).sqrt();
                out.rho_i[i][n] = if den > T::zero() { out.xcov_i[i][n] / den } else { T::zero() };
            }
        }
        Ok(out)
    }

    /// Normalises `schedule` (terminal variance → target) and builds the tables.
    pub fn build_normalized(
        schedule: &Schedule<T>,
        grid: &SpaceGrid<T>,
        spec: TableSpec,
    ) -> Result<Self> {
        let normalized =
            normalize_terminal_variance(schedule, |cand| terminal_variance(cand, grid, spec))?;
        Self::build(&normalized, grid, spec)
    }

    pub fn horizon(&self) -> T {
        self.schedule.horizon
    }

    pub fn m(&self) -> usize {
        self.grid.m
    }

    fn inner_step(&self) -> T {
        self.horizon() / T::of(self.spec.inner_steps as f64)
    }

    /// Linear interpolation position on the output lattice.
    fn locate(&self, t: T) -> (usize, T) {
        let n_out = self.spec.output_steps;
        let u = (t / self.horizon() * T::of(n_out as f64)).max(T::zero());
        let idx = u.floor().to_usize().unwrap_or(0).min(n_out - 1);
        (idx, (u - T::of(idx as f64)).min(T::one()))
    }

    fn lerp(arr: &[T], (idx, f): (usize, T)) -> T {
        arr[idx] + f * (arr[idx + 1] - arr[idx])
    }

    pub fn sigma2_at(&self, t: T) -> T {
        Self::lerp(&self.sigma2, self.locate(t))
    }

    pub fn sigma_at(&self, t: T) -> T {
        self.sigma2_at(t).max(T::zero()).sqrt()
    }

    /// σ²_t / c²(t), increasing in t for the supported schedules.
    pub fn noise_ratio_at(&self, t: T) -> T {
        let c = self.schedule.c(t);
        self.sigma2_at(t) / (c * c)
    }

    /// Smallest lattice time whose noise ratio reaches `ratio` (linear interpolation).
    pub fn time_for_noise_ratio(&self, ratio: T) -> T {
        let r = |n: usize| self.sigma2[n] / (self.c_vals[n] * self.c_vals[n]);
        let n_out = self.spec.output_steps;
        if ratio <= T::zero() {
            return T::zero();
        }
        for n in 1..=n_out {
            let (lo, hi) = (r(n - 1), r(n));
            if hi >= ratio {
                let f = if hi > lo { (ratio - lo) / (hi - lo) } else { T::one() };
                return self.times[n - 1] + f * (self.times[n] - self.times[n - 1]);
            }
        }
        self.horizon()
    }

    pub fn stats_at(&self, t: T) -> Stats<T> {
        let loc = self.locate(t);
        let m = self.m();
        let mut s = Stats {
            t,
            c: self.schedule.c(t),
            sigma2: Self::lerp(&self.sigma2, loc),
            sigma2_i: Vec::with_capacity(m),
            tau2_i: Vec::with_capacity(m),
            xcov_i: Vec::with_capacity(m),
            rho_i: Vec::with_capacity(m),
        };
        for i in 0..m {
            let s2 = Self::lerp(&self.sigma2_i[i], loc);
            let tau2 = exp_moment(0, T::of(2.0) * self.grid.x[i], t);
            let xc = Self::lerp(&self.xcov_i[i], loc);
            let den = (s2 * tau2).sqrt();
            s.rho_i.push(if den > T::zero() { xc / den } else { T::zero() });
            s.sigma2_i.push(s2);
            s.tau2_i.push(tau2);
            s.xcov_i.push(xc);
        }
        s
    }

    /// Mean c(t)·x0 and isotropic std σ_t of X_t given x0.
    pub fn marginal_moments(&self, t: T, x0: &[T]) -> Result<(Vec<T>, T)> {
        if t < T::zero() || t > self.horizon() {
            return invalid(format!("time {t} outside [0, {}]", self.horizon()));
        }
        let c = self.schedule.c(t);
        Ok((x0.iter().map(|&v| c * v).collect(), self.sigma_at(t)))
    }

    /// Covariance of (X^i − mean, Y^i[, Z^i]) at time t (row-major, 2×2 or 3×3).
    pub fn component_covariance(&self, i: usize, t: T) -> Result<Vec<Vec<T>>> {
        if i >= self.m() {
            return invalid(format!("component index {i} out of range (m = {})", self.m()));
        }
        if t < T::zero() || t > self.horizon() {
            return invalid(format!("time {t} outside [0, {}]", self.horizon()));
        }
        let loc = self.locate(t);
        let two_x = T::of(2.0) * self.grid.x[i];
        let sxx = Self::lerp(&self.sigma2_i[i], loc);
        let sxy = Self::lerp(&self.xcov_i[i], loc);
        let syy = exp_moment(0, two_x, t);
        let mat = if self.hurst.is_smooth() {
            let sxz = Self::lerp(&self.xzcov_i[i], loc);
            let syz = exp_moment(1, two_x, t);
            let szz = exp_moment(2, two_x, t);
            vec![vec![sxx, sxy, sxz], vec![sxy, syy, syz], vec![sxz, syz, szz]]
        } else {
            vec![vec![sxx, sxy], vec![sxy, syy]]
        };
        crate::linalg::clamp_psd(mat)
    }

    /// Joint covariance of V = (X, Y^1..Y^m[, Z^1..Z^m]) given x0, row-major.
    pub fn joint_covariance(&self, t: T) -> Vec<T> {
        let m = self.m();
        let smooth = self.hurst.is_smooth();
        let n = if smooth { 2 * m + 1 } else { m + 1 };
        let loc = self.locate(t);
        let mut cov = vec![T::zero(); n * n];
        let mut set = |a: usize, b: usize, v: T| {
            cov[a * n + b] = v;
            cov[b * n + a] = v;
        };
        set(0, 0, Self::lerp(&self.sigma2, loc));
        for k in 0..m {
            set(0, 1 + k, Self::lerp(&self.xy_total[k], loc));
            if smooth {
                set(0, 1 + m + k, Self::lerp(&self.xz_total[k], loc));
            }
            for i in 0..=k {
                let a = self.grid.x[i] + self.grid.x[k];
                set(1 + i, 1 + k, exp_moment(0, a, t));
                if smooth {
                    set(1 + m + i, 1 + m + k, exp_moment(2, a, t));
                }
            }
            if smooth {
                for i in 0..m {
                    // Cov(Y^i, Z^k) = ∫ e^{-x_i v} v e^{-x_k v} dv
                    let a = self.grid.x[i] + self.grid.x[k];
                    set(1 + i, 1 + m + k, exp_moment(1, a, t));
                }
            }
        }
        cov
    }

    /// α(t, s) for 0 ≤ s ≤ t ≤ T.
    pub fn alpha_at(&self, t: T, s: T) -> Result<T> {
        if s < T::zero() || t > self.horizon() || s > t {
            return invalid(format!("alpha_at requires 0 <= s <= t <= T, got s={s}, t={t}"));
        }
        let h = self.inner_step();
        let smooth = self.hurst.is_smooth();
        let k_in = self.spec.inner_steps;
        // Nearest grid index if within rounding distance, else the cell below.
        let snap = |u: T| -> (usize, bool) {
            let pos = u / h;
            let r = pos.round();
            if (pos - r).abs() <= T::of(1e-9) {
                (r.to_usize().unwrap_or(0).min(k_in), true)
            } else {
                (pos.floor().to_usize().unwrap_or(0).min(k_in), false)
            }
        };
        let point = |u: T, (j, on): (usize, bool)| -> (T, T) {
            if on {
                (h * T::of(j as f64), self.g_inner[j])
            } else {
                (u, self.schedule.sigma(u) / self.schedule.c(u))
            }
        };
        let (jt, t_on) = snap(t);
        let (js, s_on) = snap(s);
        // Descending breakpoints: t, interior grid points, s.
        let mut pts = vec![point(t, (jt, t_on))];
        let hi_excl = if t_on { jt } else { jt + 1 };
        for j in (js + 1..hi_excl).rev() {
            pts.push((h * T::of(j as f64), self.g_inner[j]));
        }
        let s_pt = point(s, (js, s_on));
        if s_pt.0 < pts.last().unwrap().0 {
            pts.push(s_pt);
        }

        let full: Vec<Cell<T>> =
            self.grid.x.iter().zip(&self.grid.q).map(|(&x, &q)| Cell::new(x, q, h)).collect();
        let mut p = vec![T::zero(); self.m()];
        let mut jv = vec![T::zero(); self.m()];
        for w in pts.windows(2) {
            let ((u1, g1), (u0, g0)) = (w[0], w[1]);
            let width = u1 - u0;
            let exact = (width - h).abs() <= T::of(1e-9) * h;
            for i in 0..self.m() {
                let cell = if exact { full[i] } else { Cell::new(full[i].x, full[i].q, width) };
                let (pn, jn) = cell.step(g0, g1, p[i], jv[i], smooth);
                p[i] = pn;
                jv[i] = jn;
            }
        }
        let g_s = pts.last().unwrap().1;
        Ok(full.iter().enumerate().map(|(i, c)| c.alpha(g_s, p[i], jv[i], smooth)).sum())
    }

    /// α(t, t_j) for every inner grid point t_j ≤ t, with t = n_inner·Δ.
    pub fn alpha_profile(&self, n_inner: usize) -> Result<Vec<(T, T)>> {
        if n_inner > self.spec.inner_steps {
            return invalid("alpha_profile index beyond the inner grid");
        }
        let h = self.inner_step();
        let smooth = self.hurst.is_smooth();
        let cells: Vec<Cell<T>> =
            self.grid.x.iter().zip(&self.grid.q).map(|(&x, &q)| Cell::new(x, q, h)).collect();
        let m = self.m();
        let mut p = vec![T::zero(); m];
        let mut jv = vec![T::zero(); m];
        let mut out = vec![(T::zero(), T::zero()); n_inner + 1];
        let total = |g: T, p: &[T], jv: &[T]| -> T {
            cells.iter().enumerate().map(|(i, c)| c.alpha(g, p[i], jv[i], smooth)).sum()
        };
        out[n_inner] = (h * T::of(n_inner as f64), total(self.g_inner[n_inner], &p, &jv));
        for j in (0..n_inner).rev() {
            let (ga, gb) = (self.g_inner[j], self.g_inner[j + 1]);
            for i in 0..m {
                let (pn, jn) = cells[i].step(ga, gb, p[i], jv[i], smooth);
                p[i] = pn;
                jv[i] = jn;
            }
            out[j] = (h * T::of(j as f64), total(ga, &p, &jv));
        }
        Ok(out)
    }
}

fn check_horizons<T: Scalar>(schedule: &Schedule<T>, grid: &SpaceGrid<T>) -> Result<()> {
    if (schedule.horizon - grid.horizon).abs() > T::of(1e-12) * schedule.horizon {
        return invalid("schedule and space grid use different horizons");
    }
    Ok(())
}

/// Running sums of one backward sweep.
struct Accum<T> {
    total: T,
    comp: Vec<T>,
    xy_comp: Vec<T>,
    xz_comp: Vec<T>,
    xy: Vec<T>,
    xz: Vec<T>,
    p: Vec<T>,
    j: Vec<T>,
    alpha: Vec<T>,
    e: Vec<T>,
}

impl<T: Scalar> Accum<T> {
    fn new(m: usize) -> Self {
        let z = || vec![T::zero(); m];
        Self {
            total: T::zero(),
            comp: z(),
            xy_comp: z(),
            xz_comp: z(),
            xy: z(),
            xz: z(),
            p: z(),
            j: z(),
            alpha: z(),
            e: z(),
        }
    }

    fn reset(&mut self) {
        self.total = T::zero();
        for v in [
            &mut self.comp,
            &mut self.xy_comp,
            &mut self.xz_comp,
            &mut self.xy,
            &mut self.xz,
            &mut self.p,
            &mut self.j,
        ] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
        self.e.iter_mut().for_each(|x| *x = T::one());
    }
}

/// Integrates α², α_i², α_i e^{-x_i(t-s)}, α e^{-x_k(t-s)} (and the Z analogues) over [0, t],
/// t = n·h, into `acc` (without the c(t) factors).
fn sweep<T: Scalar>(cells: &[Cell<T>], g: &[T], n: usize, h: T, smooth: bool, acc: &mut Accum<T>) {
    acc.reset();
    let m = cells.len();
    let tiny = T::min_positive_value().sqrt();
    for jj in (0..=n).rev() {
        if jj < n {
            let (ga, gb) = (g[jj], g[jj + 1]);
            for i in 0..m {
                let (pn, jn) = cells[i].step(ga, gb, acc.p[i], acc.j[i], smooth);
                acc.p[i] = pn;
                acc.j[i] = jn;
                let e = acc.e[i] * cells[i].decay;
                acc.e[i] = if e < tiny { T::zero() } else { e };
            }
        }
        let w = quad_weight(jj, n, h);
        let lag = h * T::of((n - jj) as f64);
        let mut a_tot = T::zero();
        for i in 0..m {
            let a = cells[i].alpha(g[jj], acc.p[i], acc.j[i], smooth);
            acc.alpha[i] = a;
            a_tot += a;
            let wa = w * a;
            acc.comp[i] += wa * a;
            acc.xy_comp[i] += wa * acc.e[i];
            if smooth {
                acc.xz_comp[i] += wa * lag * acc.e[i];
            }
        }
        let wa = w * a_tot;
        acc.total += wa * a_tot;
        for k in 0..m {
            acc.xy[k] += wa * acc.e[k];
            if smooth {
                acc.xz[k] += wa * lag * acc.e[k];
            }
        }
    }
}

/// σ²_T of a schedule (with its current norm factor) on `grid`.
pub fn terminal_variance<T: Scalar>(schedule: &Schedule<T>, grid: &SpaceGrid<T>, spec: TableSpec) -> Result<T> {
    spec.validate()?;
    check_horizons(schedule, grid)?;
    let k_in = spec.inner_steps;
    let h = schedule.horizon / T::of(k_in as f64);
    let g: Vec<T> = (0..=k_in)
        .map(|j| {
            let u = h * T::of(j as f64);
            schedule.sigma(u) / schedule.c(u)
        })
        .collect();
    let cells: Vec<Cell<T>> = grid.x.iter().zip(&grid.q).map(|(&x, &q)| Cell::new(x, q, h)).collect();
    let mut acc = Accum::new(grid.m);
    sweep(&cells, &g, k_in, h, grid.hurst.is_smooth(), &mut acc);
    let c = schedule.c(schedule.horizon);
    Ok(c * c * acc.total)
}
