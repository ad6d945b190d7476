//! Efficient estimation and inference for an unlabeled target population
//! under label shift.

pub mod analysis;
pub mod baselines;
pub mod condexp;
pub mod data;
pub mod density_ratio;
pub mod discrete;
pub mod error;
pub mod estimand;
pub mod estimators;
pub mod fredholm;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod simulation;

pub use condexp::{fit_cond_exp_nonparametric, nonparametric_cond_exp, CondExpModel, QuadRule};
pub use data::{Observation, PooledDataset};
pub use density_ratio::{DensityRatioModel, FredholmSettings, RhoGridPlan};
pub use discrete::{DiscreteRatio, DiscreteStages};
pub use error::{Error, Result};
pub use estimand::Estimand;
pub use estimators::{EstimateReport, RootSolverCfg};
pub use fredholm::{Design, FredholmSystem, GridSpec, NuisanceFunction, Ridge};
pub use kernel::{BandwidthPolicy, KernelSpec};
