//! Sample-quality metrics: sliced Wasserstein, k-NN precision/recall and the Vendi score.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg::sym_eigen;
use crate::rng::{normal, substream, Rng};
use crate::scalar::Scalar;

fn to_f64<T: Scalar>(p: ArrayView2<T>) -> Array2<f64> {
    p.mapv(|v| v.f64())
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return invalid("point sets must be non-empty");
    }
    if a.ncols() != b.ncols() {
        return invalid(format!("dimension mismatch: {} vs {}", a.ncols(), b.ncols()));
    }
    Ok(())
}

fn subsample(p: &Array2<f64>, n: usize, rng: &mut Rng) -> Array2<f64> {
    if p.nrows() == n {
        return p.clone();
    }
    let idx = sample(rng, p.nrows(), n).into_vec();
    p.select(ndarray::Axis(0), &idx)
}

/// Mean over random unit directions of the 1D W2 distance between projections.
/// The larger set is first subsampled (without replacement) to the size of the smaller.
pub fn sliced_wasserstein<T: Scalar>(
    real: ArrayView2<T>,
    gen: ArrayView2<T>,
    n_slices: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let (a, b) = (to_f64(real), to_f64(gen));
    check_pair(&a, &b)?;
    if n_slices == 0 {
        return invalid("n_slices must be positive");
    }
    let d = a.ncols();
    let dirs: Vec<Vec<f64>> = (0..n_slices)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| normal::<f64>(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let n = a.nrows().min(b.nrows());
    let (a, b) = (subsample(&a, n, rng), subsample(&b, n, rng));
    let project = |p: &Array2<f64>, v: &[f64]| {
        let mut out: Vec<f64> = p.rows().into_iter().map(|r| r.iter().zip(v).map(|(x, w)| x * w).sum()).collect();
        out.sort_by(f64::total_cmp);
        out
    };
    let per_slice: Vec<f64> = dirs
        .par_iter()
        .map(|v| {
            let (pa, pb) = (project(&a, v), project(&b, v));
            let w2: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
            w2.sqrt()
        })
        .collect();
    Ok(per_slice.iter().sum::<f64>() / n_slices as f64)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii2(p: &Array2<f64>, k: usize) -> Vec<f64> {
    (0..p.nrows())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> =
                (0..p.nrows()).filter(|&j| j != i).map(|j| sq_dist(p.row(i), p.row(j))).collect();
            *d.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect()
}

/// Fraction of `query` points inside at least one k-NN ball of `support`.
fn coverage(support: &Array2<f64>, radii2: &[f64], query: &Array2<f64>) -> f64 {
    let hits = (0..query.nrows())
        .into_par_iter()
        .filter(|&q| (0..support.nrows()).any(|s| sq_dist(query.row(q), support.row(s)) <= radii2[s]))
        .count();
    hits as f64 / query.nrows() as f64
}

/// Improved precision and recall with k-NN manifold estimates.
pub fn improved_precision_recall<T: Scalar>(real: ArrayView2<T>, gen: ArrayView2<T>, k: usize) -> Result<(f64, f64)> {
    let (a, b) = (to_f64(real), to_f64(gen));
    check_pair(&a, &b)?;
    if k == 0 || a.nrows() <= k || b.nrows() <= k {
        return invalid(format!("precision/recall need more than k = {k} points in each set"));
    }
    let ip = coverage(&a, &knn_radii2(&a, k), &b);
    let ir = coverage(&b, &knn_radii2(&b, k), &a);
    Ok((ip, ir))
}

/// RBF kernel bandwidth for the Vendi score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the evaluated set.
    MedianHeuristic,
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Fixed(h) => write!(f, "{h}"),
            Bandwidth::MedianHeuristic => f.write_str("median"),
        }
    }
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(Bandwidth::MedianHeuristic);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
            _ => Err(Error::Config(format!("bandwidth must be positive or `median`, got `{s}`"))),
        }
    }
}

/// exp of the eigenvalue entropy of K/n with K_ij = exp(−|x_i − x_j|²/(2h²)).
pub fn vendi_score<T: Scalar>(gen: ArrayView2<T>, bandwidth: Bandwidth) -> Result<f64> {
    let p = to_f64(gen);
    let n = p.nrows();
    if n < 2 {
        return invalid("the Vendi score needs at least 2 points");
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(p.row(i), p.row(j));
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::MedianHeuristic => {
            let mut upper: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[i * n + j]).collect();
            let mid = upper.len() / 2;
            upper.select_nth_unstable_by(mid, f64::total_cmp).1.sqrt()
        }
    };
    if !(h > 0.0) {
        return Ok(1.0);
    }
    let k: Vec<f64> = d2.iter().map(|v| (-v / (2.0 * h * h)).exp() / n as f64).collect();
    let eig = sym_eigen(&k, n);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue in the Vendi similarity matrix".into()));
    }
    let entropy: f64 = eig.eigenvalues.iter().filter(|&&l| l > 0.0).map(|&l| -l * l.ln()).sum();
    Ok(entropy.exp().clamp(1.0, n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub n_slices: usize,
    pub k: usize,
    pub bandwidth: Bandwidth,
    /// Vendi is computed on at most this many generated points.
    pub vendi_max_points: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { n_slices: 256, k: 3, bandwidth: Bandwidth::Fixed(2.0), vendi_max_points: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub wsd: f64,
    pub ip: f64,
    pub ir: f64,
    pub vs: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub config: MetricConfig,
}

pub fn evaluate<T: Scalar>(real: ArrayView2<T>, gen: ArrayView2<T>, config: &MetricConfig) -> Result<MetricReport> {
    let mut rng = substream(config.seed, 0);
    let wsd = sliced_wasserstein(real, gen, config.n_slices, &mut rng)?;
    let (ip, ir) = improved_precision_recall(real, gen, config.k)?;
    let g = to_f64(gen);
    let g = subsample(&g, g.nrows().min(config.vendi_max_points), &mut substream(config.seed, 1));
    let vs = vendi_score(g.view(), config.bandwidth)?;
    Ok(MetricReport { wsd, ip, ir, vs, n_real: real.nrows(), n_gen: gen.nrows(), config: config.clone() })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8}", "WSD", "IP", "IR", "VS")?;
        writeln!(f, "{:>8.4} {:>8.4} {:>8.4} {:>8.4}", self.wsd, self.ip, self.ir, self.vs)?;
        write!(
            f,
            "n_real={} n_gen={} n_slices={} k={} bandwidth={} seed={}",
            self.n_real, self.n_gen, self.config.n_slices, self.config.k, self.config.bandwidth, self.config.seed
        )
    }
}
