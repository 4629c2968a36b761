//! `gfdm` command-line tool: train, sample, eval, inspect, noise-sim.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gfdm::checkpoint::{sha256_hex, Checkpoint};
use gfdm::config::RunConfig;
use gfdm::datasets::{read_points_csv, write_points_csv};
use gfdm::metrics::{evaluate, Bandwidth, MetricConfig};
use gfdm::noise::{simulate_noise, uniform_times, write_paths_csv, NoiseOptions, Record};
use gfdm::pipeline::{inspect, run_sample, run_train};
use gfdm::sampler::{Coupling, Method, SamplerConfig};
use gfdm::ndarray::Array2;
use gfdm::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gfdm", version, about = "Generative diffusion with Markov-approximate fractional noise")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build tables, train a score network and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "SDE")]
        method: Method,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        t_end: f64,
        #[arg(long, default_value = "rescaled")]
        coupling: Coupling,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Samples CSV; the manifest goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a generated CSV against a reference CSV.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Vendi RBF bandwidth in data units, or `median`.
        #[arg(long, default_value = "2.0")]
        bandwidth: Bandwidth,
        #[arg(long, default_value_t = 256)]
        slices: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export variance, correlation and α(T,·) tables of a checkpoint as CSV.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate paths of the approximate fractional noise.
    NoiseSim {
        /// Run config providing `H`, `m`, `r` and `horizon`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 16)]
        paths: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let text = fs::read_to_string(path)?;
    Ok((RunConfig::from_text(&text)?, text))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint<f64>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    Ok((Checkpoint::from_bytes(&bytes)?, bytes))
}

fn read_csv(path: &Path) -> Result<Array2<f64>> {
    read_points_csv(File::open(path)?)
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn cmd_train(config: &Path, seed: Option<u64>, threads: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let (mut cfg, mut text) = load_config(config)?;
    cfg.check_trainable()?;
    if let Some(s) = seed {
        cfg.seed = s;
        text.push_str(&format!("# --seed override\nseed = {s}\n"));
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let total = cfg.steps;
    let every = (total / 20).max(1);
    let run = run_train(&cfg, &text, |step, loss| {
        if (step + 1) % every == 0 || step + 1 == total {
            log::info!("step {}/{total} loss {loss:.5}", step + 1);
        }
    })?;
    let ckpt_bytes = run.checkpoint.to_bytes();
    let ckpt_path = out_dir.join("checkpoint.bin");
    write_atomic(&ckpt_path, &ckpt_bytes)?;
    let mut losses = String::from("step,loss\n");
    for (k, l) in run.losses.iter().enumerate() {
        losses.push_str(&format!("{k},{l:?}\n"));
    }
    write_atomic(&out_dir.join("train_loss.csv"), losses.as_bytes())?;
    write_json(
        &out_dir.join("train_manifest.json"),
        &json!({
            "command": "train",
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": sha256_hex(text.as_bytes()),
            "checkpoint": ckpt_path.display().to_string(),
            "checkpoint_sha256": sha256_hex(&ckpt_bytes),
            "H": cfg.hurst,
            "dynamics": cfg.dynamics,
            "m": run.tables.m(),
            "seed": cfg.seed,
            "steps": run.losses.len(),
            "final_loss": run.checkpoint.final_loss,
            "norm_factor": run.tables.schedule.norm_factor,
        }),
    )?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    method: Method,
    n: usize,
    steps: usize,
    seed: u64,
    t_end: f64,
    coupling: Coupling,
    threads: usize,
    out: &Path,
) -> Result<()> {
    let (ckpt, bytes) = load_checkpoint(checkpoint)?;
    let tables = ckpt.rebuild_tables()?;
    let cfg = SamplerConfig { method, n_steps: steps, n_samples: n, seed, t_end, coupling, threads };
    let x = run_sample(&ckpt, &tables, &cfg)?;
    let mut csv = Vec::new();
    write_points_csv(x.view(), true, &mut csv)?;
    write_atomic(out, &csv)?;
    write_json(
        &out.with_extension("manifest.json"),
        &json!({
            "command": "sample",
            "version": env!("CARGO_PKG_VERSION"),
            "method": method.to_string(),
            "coupling": coupling.to_string(),
            "H": ckpt.grid.hurst.value(),
            "dynamics": ckpt.schedule.kind.to_string(),
            "steps": steps,
            "n_samples": n,
            "t_end": t_end,
            "seed": seed,
            "checkpoint": checkpoint.display().to_string(),
            "checkpoint_sha256": sha256_hex(&bytes),
            "samples_sha256": sha256_hex(&csv),
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_inspect(checkpoint: &Path, out: &Path) -> Result<()> {
    let (ckpt, _) = load_checkpoint(checkpoint)?;
    let tables = ckpt.rebuild_tables()?;
    let ins = inspect(&tables)?;
    write_atomic(&out.join("variance.csv"), ins.variance.as_bytes())?;
    write_atomic(&out.join("rho.csv"), ins.rho.as_bytes())?;
    write_atomic(&out.join("alpha.csv"), ins.alpha.as_bytes())?;
    println!("wrote variance.csv, rho.csv, alpha.csv to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_noise(
    config: &Path,
    paths: usize,
    steps: usize,
    dim: usize,
    seed: Option<u64>,
    threads: usize,
    out: &Path,
) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    let grid = cfg.grid()?;
    let times = uniform_times(cfg.horizon, steps);
    let opts = NoiseOptions { dim, record: Record::All, keep_ou: false, threads };
    let sim = simulate_noise(&grid, &times, paths, seed.unwrap_or(cfg.seed), &opts)?;
    let mut csv = Vec::new();
    write_paths_csv(&sim, &mut csv)?;
    write_atomic(out, &csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, threads, out } => cmd_train(&config, seed, threads, out),
        Cmd::Sample { checkpoint, method, n, steps, seed, t_end, coupling, threads, out } => {
            cmd_sample(&checkpoint, method, n, steps, seed, t_end, coupling, threads, &out)
        }
        Cmd::Eval { real, gen, bandwidth, slices, k, seed, threads, out } => {
            let (a, b) = (read_csv(&real)?, read_csv(&gen)?);
            let cfg = MetricConfig { n_slices: slices, k, bandwidth, seed, ..MetricConfig::default() };
            let pool = rayon_pool(threads)?;
            let report = pool.install(|| evaluate(a.view(), b.view(), &cfg))?;
            let text = format!("{report}\n");
            print!("{text}");
            if let Some(path) = out {
                write_atomic(&path, text.as_bytes())?;
            }
            Ok(())
        }
        Cmd::Inspect { checkpoint, out } => cmd_inspect(&checkpoint, &out),
        Cmd::NoiseSim { config, paths, steps, dim, seed, threads, out } => {
            cmd_noise(&config, paths, steps, dim, seed, threads, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
