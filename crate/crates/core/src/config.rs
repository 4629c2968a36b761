//! Flat `key = value` run configuration.

use std::path::PathBuf;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::{HurstIndex, SpaceGrid};
use crate::metrics::Bandwidth;
use crate::sampler::{Coupling, Method, SamplerConfig};
use crate::schedule::{Schedule, ScheduleKind};
use crate::score::{LambdaKind, TrainConfig};
use crate::tables::TableSpec;

/// Every field except `H` has a default.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dynamics: String,
    #[serde(rename = "H")]
    pub hurst: Option<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    pub m: usize,
    pub r: f64,
    #[serde(rename = "K")]
    pub inner_steps: usize,
    pub output_steps: usize,

    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub eps_t: f64,
    pub lambda_kind: String,

    pub method: String,
    pub coupling: String,
    pub n_steps: usize,
    pub n_samples: usize,
    pub t_end: f64,

    /// `half_moons`, `gaussian` or `csv`.
    pub dataset: String,
    pub n_data: usize,
    pub noise_std: f64,
    pub data_path: Option<PathBuf>,

    /// Vendi bandwidth for `eval`: a positive number or `median`.
    pub bandwidth: String,

    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = Schedule::<f64>::new(ScheduleKind::Fvp);
        let t = TrainConfig::default();
        let smp = SamplerConfig::default();
        Self {
            dynamics: "fvp".into(),
            hurst: None,
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            horizon: s.horizon,
            m: SpaceGrid::<f64>::DEFAULT_M,
            r: SpaceGrid::<f64>::DEFAULT_R,
            inner_steps: TableSpec::default().inner_steps,
            output_steps: TableSpec::default().output_steps,
            batch_size: t.batch_size,
            steps: t.steps,
            lr: t.lr,
            ema_decay: t.ema_decay,
            eps_t: t.eps_t,
            lambda_kind: t.lambda_kind.to_string(),
            method: smp.method.to_string(),
            coupling: smp.coupling.to_string(),
            n_steps: smp.n_steps,
            n_samples: smp.n_samples,
            t_end: smp.t_end,
            dataset: "half_moons".into(),
            n_data: 10_000,
            noise_std: 0.08,
            data_path: None,
            bandwidth: "2.0".into(),
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("run"),
        }
    }
}

const KEYS: &[&str] = &[
    "dynamics", "H", "sigma_min", "sigma_max", "beta_min", "beta_max", "horizon", "m", "r", "K",
    "output_steps", "batch_size", "steps", "lr", "ema_decay", "eps_t", "lambda_kind", "method",
    "coupling", "n_steps", "n_samples", "t_end", "dataset", "n_data", "noise_std", "data_path",
    "bandwidth", "seed", "threads", "out_dir",
];

impl RunConfig {
    /// Parses and validates; all unknown keys are reported together.
    pub fn from_text(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let unknown: Vec<&str> = table.keys().map(String::as_str).filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hurst()?;
        self.schedule()?.validate()?;
        self.table_spec().validate()?;
        self.train_config()?.validate()?;
        self.sampler_config()?;
        self.bandwidth()?;
        match self.dataset.as_str() {
            "half_moons" | "gaussian" => {}
            "csv" if self.data_path.is_some() => {}
            "csv" => return Err(Error::Config("dataset = \"csv\" requires `data_path`".into())),
            other => return Err(Error::Config(format!("unknown dataset `{other}` (half_moons | gaussian | csv)"))),
        }
        if self.n_data == 0 || self.noise_std < 0.0 {
            return Err(Error::Config("n_data must be positive and noise_std non-negative".into()));
        }
        Ok(())
    }

    pub fn hurst(&self) -> Result<HurstIndex<f64>> {
        let h = self.hurst.ok_or_else(|| Error::Config("missing required key `H`".into()))?;
        HurstIndex::new(h)
    }

    /// Learned scores exist only for H ≤ 1/2.
    pub fn check_trainable(&self) -> Result<()> {
        if self.hurst()?.is_smooth() {
            return Err(Error::Unsupported(format!(
                "H = {} > 1/2: learned-score training is restricted to H <= 1/2",
                self.hurst.unwrap_or(f64::NAN)
            )));
        }
        Ok(())
    }

    /// Unnormalised schedule (norm_factor = 1).
    pub fn schedule(&self) -> Result<Schedule<f64>> {
        let mut s = Schedule::new(self.dynamics.parse::<ScheduleKind>()?);
        s.sigma_min = self.sigma_min;
        s.sigma_max = self.sigma_max;
        s.beta_min = self.beta_min;
        s.beta_max = self.beta_max;
        s.horizon = self.horizon;
        Ok(s)
    }

    pub fn grid(&self) -> Result<SpaceGrid<f64>> {
        SpaceGrid::build(self.hurst()?, self.m, self.r, self.horizon)
    }

    pub fn table_spec(&self) -> TableSpec {
        TableSpec { inner_steps: self.inner_steps, output_steps: self.output_steps }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr,
            ema_decay: self.ema_decay,
            seed: self.seed,
            eps_t: self.eps_t,
            lambda_kind: self.lambda_kind.parse::<LambdaKind>()?,
        })
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        if self.n_steps == 0 || self.n_samples == 0 {
            return Err(Error::Config("n_steps and n_samples must be positive".into()));
        }
        if !(self.t_end > 0.0 && self.t_end < self.horizon) {
            return Err(Error::Config(format!("t_end must lie in (0, {})", self.horizon)));
        }
        Ok(SamplerConfig {
            method: self.method.parse::<Method>()?,
            n_steps: self.n_steps,
            n_samples: self.n_samples,
            seed: self.seed,
            t_end: self.t_end,
            coupling: self.coupling.parse::<Coupling>()?,
            threads: self.threads,
        })
    }

    pub fn bandwidth(&self) -> Result<Bandwidth> {
        self.bandwidth.parse()
    }
}
