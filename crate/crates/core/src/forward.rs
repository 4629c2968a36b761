//! Forward process: analytic marginal draws and an Euler–Maruyama oracle of the coupled system.

use crate::error::{invalid, Result};
use crate::grid::SpaceGrid;
use crate::noise::{check_time_grid, Record};
use crate::rng::{normal, Rng};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::tables::KernelTables;

/// Lower time cutoff for training draws.
pub const EPS_T: f64 = 1e-5;

/// One draw X_t = c(t)·x0 + σ_t·ξ.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample<T> {
    pub x_t: Vec<T>,
    pub xi: Vec<T>,
    pub t: T,
    pub x0: Vec<T>,
}

/// Draws X_t | x0 for each (x0, t) pair.
pub fn sample_marginal<T: Scalar>(
    tables: &KernelTables<T>,
    x0_batch: &[Vec<T>],
    t_batch: &[T],
    rng: &mut Rng,
) -> Result<Vec<ForwardSample<T>>> {
    if x0_batch.len() != t_batch.len() {
        return invalid("x0 and t batches differ in length");
    }
    x0_batch
        .iter()
        .zip(t_batch)
        .map(|(x0, &t)| {
            if !(t > T::of(EPS_T)) || t > tables.horizon() {
                return invalid(format!("time {t} outside ({EPS_T}, {}]", tables.horizon()));
            }
            let c = tables.schedule.c(t);
            let sigma = tables.sigma_at(t);
            let xi: Vec<T> = x0.iter().map(|_| normal(rng)).collect();
            let x_t = x0.iter().zip(&xi).map(|(&a, &e)| c * a + sigma * e).collect();
            Ok(ForwardSample { x_t, xi, t, x0: x0.clone() })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub record: Record,
    pub keep_ou: bool,
    /// Node indices whose component processes X^i (started at x0/m) are tracked.
    pub components: Vec<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { record: Record::All, keep_ou: false, components: Vec::new() }
    }
}

/// State of the coupled forward system at a recorded time.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSnapshot<T> {
    pub t: T,
    /// `x[dim]`
    pub x: Vec<T>,
    /// `y[dim][node]` when `keep_ou`
    pub y: Option<Vec<Vec<T>>>,
    pub z: Option<Vec<Vec<T>>>,
    /// `x_comp[k][dim]` for `components[k]`
    pub x_comp: Vec<Vec<T>>,
}

/// Euler–Maruyama integration of dX = [μX − σS^H]dt + C_H σ dW with the OU family
/// driven by the same increments.
pub fn simulate_forward_em<T: Scalar>(
    schedule: &Schedule<T>,
    grid: &SpaceGrid<T>,
    x0: &[T],
    time_grid: &[T],
    rng: &mut Rng,
    opts: &ForwardOptions,
) -> Result<Vec<ForwardSnapshot<T>>> {
    check_time_grid(grid.x_max(), time_grid)?;
    if let Some(&bad) = opts.components.iter().find(|&&i| i >= grid.m) {
        return invalid(format!("component index {bad} out of range"));
    }
    let d = x0.len();
    let m = grid.m;
    let smooth = grid.hurst.is_smooth();
    let c_h = grid.c_h();
    let m_t = T::of(m as f64);
    let mut x = x0.to_vec();
    let mut y = vec![vec![T::zero(); m]; d];
    let mut z = vec![vec![T::zero(); m]; d];
    let mut xc: Vec<Vec<T>> = opts.components.iter().map(|_| x0.iter().map(|&v| v / m_t).collect()).collect();

    let keep = opts.record.indices(time_grid.len());
    let mut out = Vec::with_capacity(keep.len());
    let snap = |k: usize, x: &[T], y: &[Vec<T>], z: &[Vec<T>], xc: &[Vec<T>]| ForwardSnapshot {
        t: time_grid[k],
        x: x.to_vec(),
        y: opts.keep_ou.then(|| y.to_vec()),
        z: (opts.keep_ou && smooth).then(|| z.to_vec()),
        x_comp: xc.to_vec(),
    };
    let mut next = 0;
    if keep.first() == Some(&0) {
        out.push(snap(0, &x, &y, &z, &xc));
        next = 1;
    }
    for k in 1..time_grid.len() {
        let t = time_grid[k - 1];
        let dt = time_grid[k] - t;
        let sdt = dt.sqrt();
        let mu = schedule.mu(t);
        let sigma = schedule.sigma(t);
        for j in 0..d {
            let dw = sdt * normal::<T>(rng);
            let (yj, zj) = (&mut y[j], &mut z[j]);
            let mut s_h = T::zero();
            for i in 0..m {
                s_h += grid.q[i] * if smooth { grid.x[i] * zj[i] - yj[i] } else { grid.x[i] * yj[i] };
            }
            for (ci, &node) in opts.components.iter().enumerate() {
                let (xi, qi) = (grid.x[node], grid.q[node]);
                let v = xc[ci][j];
                xc[ci][j] = if smooth {
                    v + (mu * v - sigma * qi * (xi * zj[node] - yj[node])) * dt
                } else {
                    v + (mu * v - sigma * qi * xi * yj[node]) * dt + qi * sigma * dw
                };
            }
            x[j] = x[j] + (mu * x[j] - sigma * s_h) * dt + c_h * sigma * dw;
            for i in 0..m {
                let yo = yj[i];
                if smooth {
                    let zo = zj[i];
                    zj[i] = zo + (yo - grid.x[i] * zo) * dt;
                }
                yj[i] = yo - grid.x[i] * yo * dt + dw;
            }
        }
        if next < keep.len() && keep[next] == k {
            out.push(snap(k, &x, &y, &z, &xc));
            next += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::HurstIndex;
    use crate::noise::uniform_times;
    use crate::rng::substream;
    use crate::schedule::ScheduleKind;
    use crate::tables::TableSpec;

    #[test]
    fn marginal_draw_satisfies_reparameterisation() {
        let g = SpaceGrid::<f64>::build(HurstIndex::new(0.25).unwrap(), 8, 1.5, 1.0).unwrap();
        let tb = KernelTables::build_normalized(&Schedule::new(ScheduleKind::Fvp), &g, TableSpec { inner_steps: 1000, output_steps: 100 }).unwrap();
        let mut rng = substream(1, 0);
        let x0 = vec![vec![0.3, -1.2], vec![2.0, 0.1]];
        let out = sample_marginal(&tb, &x0, &[0.4, 0.9], &mut rng).unwrap();
        for s in &out {
            let (c, sig) = (tb.schedule.c(s.t), tb.sigma_at(s.t));
            for j in 0..2 {
                assert!(((s.x_t[j] - c * s.x0[j]) / sig - s.xi[j]).abs() < 1e-12);
            }
        }
        assert!(sample_marginal(&tb, &x0[..1], &[EPS_T], &mut rng).is_err());
    }

    #[test]
    fn components_sum_to_the_full_process() {
        for h in [0.25, 0.75] {
            let g = SpaceGrid::build(HurstIndex::new(h).unwrap(), 8, 1.5, 1.0).unwrap();
            let s = Schedule::new(ScheduleKind::SubFvp);
            let opts = ForwardOptions { record: Record::Every(100), components: (0..8).collect(), ..Default::default() };
            let mut rng = substream(5, 0);
            let path = simulate_forward_em(&s, &g, &[0.7, -0.2], &uniform_times(1.0, 1000), &mut rng, &opts).unwrap();
            for snap in &path {
                for j in 0..2 {
                    let sum: f64 = snap.x_comp.iter().map(|c| c[j]).sum();
                    assert!((sum - snap.x[j]).abs() < 1e-10, "H={h}: {sum} vs {}", snap.x[j]);
                }
            }
        }
    }
}
