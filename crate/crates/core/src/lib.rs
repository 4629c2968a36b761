//! Generative fractional diffusion models.
//!
//! Fractional Brownian motion is approximated by a weighted sum of Ornstein–Uhlenbeck
//! processes driven by one Brownian motion. The forward diffusion driven by this noise
//! has a Gaussian perturbation kernel that is precomputed in [`tables::KernelTables`];
//! a score network is trained by denoising score matching and samples are drawn with
//! the coupled reverse-time dynamics in [`sampler`].

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod score;
pub mod tables;

pub use error::{Error, Result};
pub use ndarray;
pub use grid::{HurstIndex, Roughness, SpaceGrid};
pub use scalar::Scalar;
pub use schedule::{Schedule, ScheduleKind};
pub use tables::{KernelTables, TableSpec};

pub type SpaceGrid64 = grid::SpaceGrid<f64>;
pub type SpaceGrid32 = grid::SpaceGrid<f32>;
pub type Schedule64 = schedule::Schedule<f64>;
pub type KernelTables64 = tables::KernelTables<f64>;
pub type KernelTables32 = tables::KernelTables<f32>;
