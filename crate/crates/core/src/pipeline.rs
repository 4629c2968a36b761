//! End-to-end steps shared by the command-line tool and the acceptance tests.

use std::fmt::Write as _;
use std::fs::File;

use ndarray::Array2;

use crate::checkpoint::{tables_hash, Checkpoint};
use crate::config::RunConfig;
use crate::datasets::{gaussian_reference, half_moons, read_points_csv, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::nn::{NetConfig, ScoreNet};
use crate::rng::substream;
use crate::sampler::{sample, SamplerConfig};
use crate::score::{train, LearnedScore};
use crate::tables::KernelTables;

/// Normalised kernel tables for a run.
pub fn build_tables(cfg: &RunConfig) -> Result<KernelTables<f64>> {
    KernelTables::build_normalized(&cfg.schedule()?, &cfg.grid()?, cfg.table_spec())
}

/// Training data in standardised coordinates.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset<f64>> {
    match cfg.dataset.as_str() {
        "half_moons" => half_moons(cfg.n_data, cfg.noise_std, cfg.seed),
        "gaussian" => Ok(gaussian_reference(cfg.n_data, 2, cfg.seed)),
        "csv" => {
            let path = cfg.data_path.as_ref().ok_or_else(|| Error::Config("`data_path` is not set".into()))?;
            let raw = read_points_csv(File::open(path)?)?;
            let standardizer = Standardizer::fit(raw.view())?;
            Ok(Dataset {
                name: path.display().to_string(),
                seed: cfg.seed,
                points: standardizer.apply(raw.view()),
                standardizer,
            })
        }
        other => Err(Error::Config(format!("unknown dataset `{other}`"))),
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint<f64>,
    pub losses: Vec<f64>,
    pub tables: KernelTables<f64>,
}

/// grid → normalised schedule → tables → training → checkpoint.
pub fn run_train(cfg: &RunConfig, config_text: &str, on_step: impl FnMut(usize, f64)) -> Result<TrainOutput> {
    cfg.check_trainable()?;
    let tables = build_tables(cfg)?;
    let data = load_dataset(cfg)?;
    let train_cfg = cfg.train_config()?;
    let dim = data.points.ncols();
    let net = ScoreNet::new(&NetConfig::for_dim(dim), &mut substream(train_cfg.seed, 0));
    let out = train(net, &train_cfg, data.points.view(), &tables, on_step)?;
    let checkpoint = Checkpoint {
        dim,
        schedule: tables.schedule,
        grid: tables.grid.clone(),
        table_spec: tables.spec,
        tables_hash: tables_hash(&tables),
        train: train_cfg,
        run_config: config_text.to_string(),
        net: out.net,
        ema: out.ema,
        standardizer: data.standardizer,
        rng: out.rng,
        steps_done: out.losses.len() as u64,
        final_loss: out.losses.last().copied(),
    };
    Ok(TrainOutput { checkpoint, losses: out.losses, tables })
}

/// Samples from the EMA network and maps them back to data units.
pub fn run_sample(ckpt: &Checkpoint<f64>, tables: &KernelTables<f64>, cfg: &SamplerConfig) -> Result<Array2<f64>> {
    let score = LearnedScore { net: &ckpt.ema, tables };
    let x = sample(tables, &score, ckpt.dim, cfg)?;
    Ok(ckpt.standardizer.invert(x.view()))
}

/// Kernel diagnostics as CSV text.
pub struct Inspection {
    /// `t,c,sigma2`
    pub variance: String,
    /// `t,rho_1,...,rho_m`
    pub rho: String,
    /// `s,alpha` for α(T, s) on the inner grid.
    pub alpha: String,
}

pub fn inspect(tables: &KernelTables<f64>) -> Result<Inspection> {
    let mut variance = String::from("t,c,sigma2\n");
    let mut rho = String::from("t");
    for i in 1..=tables.m() {
        write!(rho, ",rho_{i}").unwrap();
    }
    rho.push('\n');
    for (n, &t) in tables.times.iter().enumerate() {
        writeln!(variance, "{t:?},{:?},{:?}", tables.c_vals[n], tables.sigma2[n]).unwrap();
        write!(rho, "{t:?}").unwrap();
        for r in &tables.rho_i {
            write!(rho, ",{:?}", r[n]).unwrap();
        }
        rho.push('\n');
    }
    let mut alpha = String::from("s,alpha\n");
    for (s, a) in tables.alpha_profile(tables.spec.inner_steps)? {
        writeln!(alpha, "{s:?},{a:?}").unwrap();
    }
    Ok(Inspection { variance, rho, alpha })
}
