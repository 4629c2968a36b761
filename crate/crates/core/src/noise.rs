//! Euler–Maruyama simulation of the OU family under one shared Brownian motion.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{HurstIndex, SpaceGrid};
use crate::rng::{normal, substream};
use crate::scalar::Scalar;

/// OU coordinates at one time; `y[dim][i]`, `z` present iff H > 1/2.
#[derive(Clone, Debug, PartialEq)]
pub struct OuState<T> {
    pub t: T,
    pub y: Vec<Vec<T>>,
    pub z: Option<Vec<Vec<T>>>,
}

/// One simulated path of W^{H,m}, recorded at a subset of the time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath<T> {
    pub path_id: usize,
    pub times: Vec<T>,
    /// `w_hm[dim][k]`
    pub w_hm: Vec<Vec<T>>,
    pub ou: Option<Vec<OuState<T>>>,
}

/// Which time-grid indices to keep.
#[derive(Clone, Debug)]
pub enum Record {
    All,
    Every(usize),
    At(Vec<usize>),
}

impl Record {
    pub(crate) fn indices(&self, n_times: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = match self {
            Record::All => (0..n_times).collect(),
            Record::Every(s) => (0..n_times).step_by((*s).max(1)).chain([n_times - 1]).collect(),
            Record::At(v) => std::iter::once(0).chain(v.iter().copied()).collect(),
        };
        idx.retain(|&k| k < n_times);
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

#[derive(Clone, Debug)]
pub struct NoiseOptions {
    pub dim: usize,
    pub record: Record,
    pub keep_ou: bool,
    /// 1 runs in the calling thread; more uses a scoped rayon pool.
    pub threads: usize,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self { dim: 1, record: Record::All, keep_ou: false, threads: 1 }
    }
}

/// Checks `time_grid` starts at 0, increases, and respects `x_max Δ ≤ 0.5`.
pub fn check_time_grid<T: Scalar>(x_max: T, time_grid: &[T]) -> Result<()> {
    if time_grid.len() < 2 || time_grid[0] != T::zero() {
        return invalid("time grid must start at 0 and contain at least two points");
    }
    let mut dmax = T::zero();
    for w in time_grid.windows(2) {
        let d = w[1] - w[0];
        if !(d > T::zero()) {
            return invalid("time grid must be strictly increasing");
        }
        dmax = dmax.max(d);
    }
    if x_max * dmax > T::of(0.5) {
        return Err(Error::Stability(format!(
            "x_max * dt = {} exceeds 0.5; use dt <= {}",
            x_max * dmax,
            T::of(0.5) / x_max
        )));
    }
    Ok(())
}

/// Simulates `n_paths` independent paths; path `p` uses RNG substream `p` of `seed`.
pub fn simulate_noise<T: Scalar>(
    grid: &SpaceGrid<T>,
    time_grid: &[T],
    n_paths: usize,
    seed: u64,
    opts: &NoiseOptions,
) -> Result<Vec<NoisePath<T>>> {
    check_time_grid(grid.x_max(), time_grid)?;
    if opts.dim == 0 {
        return invalid("dimension must be positive");
    }
    let keep = opts.record.indices(time_grid.len());
    let run = |p: usize| simulate_path(grid, time_grid, p, seed, opts, &keep);
    if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(pool.install(|| (0..n_paths).into_par_iter().map(run).collect()))
    } else {
        Ok((0..n_paths).map(run).collect())
    }
}

fn simulate_path<T: Scalar>(
    grid: &SpaceGrid<T>,
    time_grid: &[T],
    path_id: usize,
    seed: u64,
    opts: &NoiseOptions,
    keep: &[usize],
) -> NoisePath<T> {
    let m = grid.m;
    let smooth = grid.hurst.is_smooth();
    let mut rng = substream(seed, path_id as u64);
    let mut y = vec![vec![T::zero(); m]; opts.dim];
    let mut z = vec![vec![T::zero(); m]; if smooth { opts.dim } else { 0 }];
    let mut w_hm = vec![Vec::with_capacity(keep.len()); opts.dim];
    let mut ou = opts.keep_ou.then(|| Vec::with_capacity(keep.len()));
    let mut times = Vec::with_capacity(keep.len());
    let mut next = 0;

    let mut record = |k: usize, y: &[Vec<T>], z: &[Vec<T>]| {
        times.push(time_grid[k]);
        for d in 0..opts.dim {
            let src = if smooth { &z[d] } else { &y[d] };
            w_hm[d].push(src.iter().zip(&grid.q).map(|(&v, &q)| q * v).sum());
        }
        if let Some(ou) = ou.as_mut() {
            ou.push(OuState {
                t: time_grid[k],
                y: y.to_vec(),
                z: smooth.then(|| z.to_vec()),
            });
        }
    };

    if keep.first() == Some(&0) {
        record(0, &y, &z);
        next = 1;
    }
    for k in 1..time_grid.len() {
        let dt = time_grid[k] - time_grid[k - 1];
        let sdt = dt.sqrt();
        for d in 0..opts.dim {
            let dw = sdt * normal::<T>(&mut rng);
            let yd = &mut y[d];
            if smooth {
                let zd = &mut z[d];
                for i in 0..m {
                    let yo = yd[i];
                    let zo = zd[i];
                    zd[i] = zo + (yo - grid.x[i] * zo) * dt;
                    yd[i] = yo - grid.x[i] * yo * dt + dw;
                }
            } else {
                for i in 0..m {
                    let yo = yd[i];
                    yd[i] = yo - grid.x[i] * yo * dt + dw;
                }
            }
        }
        if next < keep.len() && keep[next] == k {
            record(k, &y, &z);
            next += 1;
        }
    }
    NoisePath { path_id, times, w_hm, ou }
}

/// ρ_H(t,s) = ½[t^{2H} + s^{2H} − |t−s|^{2H}].
pub fn fbm_covariance<T: Scalar>(h: HurstIndex<T>, s: T, t: T) -> Result<T> {
    if s < T::zero() || t < T::zero() {
        return invalid("times must be non-negative");
    }
    let e = T::of(2.0) * h.value();
    Ok(T::of(0.5) * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e)))
}

/// Cov(W^{H,m}_s, W^{H,m}_t) of the finite approximation.
pub fn approx_covariance<T: Scalar>(grid: &SpaceGrid<T>, s: T, t: T) -> Result<T> {
    if s < T::zero() || t < T::zero() {
        return invalid("times must be non-negative");
    }
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    Ok(grid.covariance(s, t))
}

/// CSV with columns `time,dim,path_id,w_hm`.
pub fn write_paths_csv<T: Scalar, W: Write>(paths: &[NoisePath<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["time", "dim", "path_id", "w_hm"]).map_err(io)?;
    for p in paths {
        for (d, series) in p.w_hm.iter().enumerate() {
            for (t, v) in p.times.iter().zip(series) {
                w.write_record(&[t.to_string(), d.to_string(), p.path_id.to_string(), v.to_string()])
                    .map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `n + 1` uniform points on `[0, horizon]`.
pub fn uniform_times<T: Scalar>(horizon: T, n: usize) -> Vec<T> {
    (0..=n).map(|k| horizon * T::of(k as f64) / T::of(n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: f64, m: usize) -> SpaceGrid<f64> {
        SpaceGrid::build(HurstIndex::new(h).unwrap(), m, 1.35, 1.0).unwrap()
    }

    #[test]
    fn covariance_examples() {
        let h = HurstIndex::new(0.5f64).unwrap();
        assert!((fbm_covariance(h, 0.3, 0.7).unwrap() - 0.3).abs() < 1e-15);
        for v in [0.1, 0.25, 0.9] {
            let h = HurstIndex::<f64>::new(v).unwrap();
            assert!((fbm_covariance(h, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        }
        let h = HurstIndex::new(0.25f64).unwrap();
        assert!((fbm_covariance(h, 0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(fbm_covariance(h, -0.1, 1.0).is_err());
        let g = grid(0.25, 8);
        assert_eq!(approx_covariance(&g, 0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn brownian_path_is_cumulative_increment_sum() {
        let g = grid(0.5, 40);
        let times = uniform_times(1.0, 100);
        let opts = NoiseOptions { keep_ou: true, ..Default::default() };
        let p = &simulate_noise(&g, &times, 1, 7, &opts).unwrap()[0];
        let mut rng = substream(7, 0);
        let mut acc = 0.0;
        for k in 1..=100 {
            acc += (times[k] - times[k - 1]).sqrt() * normal::<f64>(&mut rng);
            assert_eq!(p.w_hm[0][k], acc);
        }
        assert_eq!(p.w_hm[0][0], 0.0);
    }

    #[test]
    fn stored_values_are_weighted_ou_sums() {
        for h in [0.25, 0.75] {
            let g = grid(h, 8);
            let times = uniform_times(1.0, 200);
            let opts = NoiseOptions { dim: 2, keep_ou: true, record: Record::Every(7), threads: 1 };
            let p = &simulate_noise(&g, &times, 1, 3, &opts).unwrap()[0];
            for (k, st) in p.ou.as_ref().unwrap().iter().enumerate() {
                for d in 0..2 {
                    let src = if h > 0.5 { &st.z.as_ref().unwrap()[d] } else { &st.y[d] };
                    let w: f64 = src.iter().zip(&g.q).map(|(v, q)| q * v).sum();
                    assert_eq!(w, p.w_hm[d][k]);
                }
            }
            assert_eq!(p.w_hm[0][0], 0.0);
        }
    }

    #[test]
    fn stability_bound_names_max_step() {
        let g = grid(0.1, 40);
        let err = simulate_noise(&g, &uniform_times(1.0, 100), 1, 0, &NoiseOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Stability(ref m) if m.contains("dt <=")));
    }

    #[test]
    fn seeded_runs_repeat_and_threads_agree() {
        let g = grid(0.25, 8);
        let times = uniform_times(1.0, 500);
        let opts = NoiseOptions { record: Record::Every(50), ..Default::default() };
        let a = simulate_noise(&g, &times, 6, 11, &opts).unwrap();
        let b = simulate_noise(&g, &times, 6, 11, &opts).unwrap();
        let c = simulate_noise(&g, &times, 6, 11, &NoiseOptions { threads: 3, ..opts }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}
