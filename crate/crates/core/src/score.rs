//! Denoising score matching and the training loop.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::forward::sample_marginal;
use crate::nn::{draw_rows, ema_update, Adam, Dense, ScoreNet};
use crate::rng::{substream, Rng};
use crate::scalar::Scalar;
use crate::tables::KernelTables;

/// Source of ∇_x log p_t(x) estimates for the reverse sampler.
pub trait ScoreFn<T: Scalar>: Sync {
    /// One row per state in `x`.
    fn score(&self, x: ArrayView2<T>, t: T) -> Result<Array2<T>>;

    /// True for trained networks (restricted to H ≤ 1/2).
    fn is_learned(&self) -> bool {
        false
    }
}

/// s_θ(x,t) = net(x,t)/σ_t ≈ ξ/σ_t; the score estimate is −s_θ.
pub struct LearnedScore<'a, T> {
    pub net: &'a ScoreNet<T>,
    pub tables: &'a KernelTables<T>,
}

impl<T: Scalar> ScoreFn<T> for LearnedScore<'_, T> {
    fn score(&self, x: ArrayView2<T>, t: T) -> Result<Array2<T>> {
        let sigma = self.tables.sigma_at(t);
        let ts = vec![t; x.nrows()];
        Ok(self.net.forward(x, &ts)? * (-T::one() / sigma))
    }

    fn is_learned(&self) -> bool {
        true
    }
}

/// Weighting λ(t) of the score-matching objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaKind {
    /// λ = σ²_t, i.e. ||ξ − σ_t s_θ||².
    Sigma2,
    /// λ = 1.
    Unit,
}

impl std::str::FromStr for LambdaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma2" => Ok(LambdaKind::Sigma2),
            "unit" => Ok(LambdaKind::Unit),
            _ => Err(Error::Config(format!("unknown lambda_kind `{s}` (sigma2 | unit)"))),
        }
    }
}

impl std::fmt::Display for LambdaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LambdaKind::Sigma2 => "sigma2",
            LambdaKind::Unit => "unit",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub eps_t: f64,
    pub lambda_kind: LambdaKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            steps: 20_000,
            lr: 1e-3,
            ema_decay: 0.999,
            seed: 0,
            eps_t: crate::forward::EPS_T,
            lambda_kind: LambdaKind::Sigma2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.eps_t > 0.0) {
            return invalid("batch_size, lr and eps_t must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return invalid("ema_decay must lie in (0,1)");
        }
        Ok(())
    }
}

/// One score-matching minibatch.
#[derive(Clone, Debug)]
pub struct DsmBatch<T> {
    pub x_t: Array2<T>,
    pub t: Vec<T>,
    pub xi: Array2<T>,
    pub sigma: Vec<T>,
}

/// Draws t ~ U[eps, T], ξ ~ N(0, I) and X_t for each row of `x0`.
pub fn draw_dsm_batch<T: Scalar>(
    tables: &KernelTables<T>,
    x0: ArrayView2<T>,
    eps_t: f64,
    rng: &mut Rng,
) -> Result<DsmBatch<T>> {
    if x0.nrows() == 0 {
        return invalid("empty batch");
    }
    let horizon = tables.horizon().f64();
    let mut t = Vec::with_capacity(x0.nrows());
    let mut sigma = Vec::with_capacity(x0.nrows());
    for _ in 0..x0.nrows() {
        loop {
            let tv = T::of(eps_t + (horizon - eps_t) * rng.random::<f64>());
            let s = tables.sigma_at(tv);
            if s >= T::of(1e-12) && tv > T::of(crate::forward::EPS_T) {
                t.push(tv);
                sigma.push(s);
                break;
            }
        }
    }
    let rows: Vec<Vec<T>> = x0.rows().into_iter().map(|r| r.to_vec()).collect();
    let draws = sample_marginal(tables, &rows, &t, rng)?;
    let d = x0.ncols();
    let x_t = Array2::from_shape_fn((rows.len(), d), |(r, j)| draws[r].x_t[j]);
    let xi = Array2::from_shape_fn((rows.len(), d), |(r, j)| draws[r].xi[j]);
    Ok(DsmBatch { x_t, t, xi, sigma })
}

fn weight<T: Scalar>(lambda: LambdaKind, sigma: T) -> T {
    match lambda {
        LambdaKind::Sigma2 => T::one(),
        LambdaKind::Unit => T::one() / (sigma * sigma),
    }
}

/// mean_b λ(t_b) ||ξ_b/σ_b − s_b||² for score-model outputs `s_theta`.
pub fn dsm_objective<T: Scalar>(batch: &DsmBatch<T>, s_theta: ArrayView2<T>, lambda: LambdaKind) -> T {
    let n = batch.x_t.nrows();
    let mut acc = T::zero();
    for r in 0..n {
        let sig = batch.sigma[r];
        let mut sq = T::zero();
        for j in 0..batch.x_t.ncols() {
            let e = batch.xi[[r, j]] - sig * s_theta[[r, j]];
            sq += e * e;
        }
        acc += weight(lambda, sig) * sq;
    }
    acc / T::of(n as f64)
}

/// Loss and parameter gradients for s_θ = net/σ_t.
pub fn dsm_loss<T: Scalar>(net: &ScoreNet<T>, batch: &DsmBatch<T>, lambda: LambdaKind) -> (T, Vec<Dense<T>>) {
    let (out, cache) = net.forward_cached(batch.x_t.view(), &batch.t);
    let n = T::of(batch.x_t.nrows() as f64);
    let mut grad = out.clone();
    let mut loss = T::zero();
    for (r, mut row) in grad.rows_mut().into_iter().enumerate() {
        let w = weight(lambda, batch.sigma[r]);
        for j in 0..row.len() {
            let e = out[[r, j]] - batch.xi[[r, j]];
            loss += w * e * e;
            row[j] = T::of(2.0) * w * e / n;
        }
    }
    (loss / n, net.backward(&cache, grad.view()))
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub net: ScoreNet<T>,
    pub ema: ScoreNet<T>,
    pub adam: Adam<T>,
    pub losses: Vec<T>,
    pub rng: Rng,
}

/// Runs `cfg.steps` Adam steps on standardised `data`; `on_step(step, loss)` observes progress.
pub fn train<T: Scalar>(
    net: ScoreNet<T>,
    cfg: &TrainConfig,
    data: ArrayView2<T>,
    tables: &KernelTables<T>,
    mut on_step: impl FnMut(usize, T),
) -> Result<Trained<T>> {
    cfg.validate()?;
    if data.nrows() == 0 || data.ncols() != net.dim {
        return invalid("training data must be non-empty with the network's dimension");
    }
    if tables.hurst.is_smooth() {
        return Err(Error::Unsupported(
            "learned scores are restricted to H <= 1/2 (no score rescaling exists for H > 1/2)".into(),
        ));
    }
    let mut rng = substream(cfg.seed, 1);
    let mut adam = Adam::new(net.n_params(), T::of(cfg.lr));
    let mut ema = net.clone();
    let mut net = net;
    let mut losses = Vec::with_capacity(cfg.steps);
    let decay = T::of(cfg.ema_decay);
    for step in 0..cfg.steps {
        let x0 = draw_rows(data, cfg.batch_size, &mut rng);
        let batch = draw_dsm_batch(tables, x0.view(), cfg.eps_t, &mut rng)?;
        let (loss, grads) = dsm_loss(&net, &batch, cfg.lambda_kind);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss became {loss} at step {step}")));
        }
        adam.update(&mut net, &grads);
        ema_update(&mut ema, &net, decay);
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(Trained { net, ema, adam, losses, rng })
}
