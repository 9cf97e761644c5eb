//! Graph-conditioned diffusion policies for stochastic power allocation in
//! wireless interference networks.
//!
//! The pipeline: [`netgen`] draws networks, [`expert`] produces samples of a
//! near-optimal stochastic policy by dual descent, [`trainer`] fits a
//! GNN-backed denoising diffusion model ([`gnn`], [`diffusion`]) to those
//! samples, and [`eval`] executes the policies sequentially under fading.
//! [`pipeline`] chains the stages with on-disk artifacts from [`store`].

pub mod autodiff;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod expert;
pub mod gnn;
pub mod matrix;
pub mod netgen;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod trainer;

pub use diffusion::{LossWeighting, NoiseSchedule, ScheduleKind};
pub use error::{Error, Result};
pub use eval::{GdmMode, PolicySource, RolloutReport, RolloutSeeds};
pub use expert::{DualState, ExpertBuffer, ExpertConfig, SubproblemGains};
pub use gnn::{GnnConfig, GnnParams};
pub use matrix::Matrix;
pub use netgen::{FadingSample, Gso, NetworkConfig, NetworkState};
pub use pipeline::{ExperimentConfig, Manifest};
pub use store::{BufferSet, Dataset, Split};
pub use trainer::{Checkpoint, TrainConfig};

#[cfg(test)]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
