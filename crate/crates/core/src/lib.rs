//! Estimating the largest mean among K stochastic systems.
//!
//! Samples are allocated with a generalized UCB policy ([`policy`]). From the
//! resulting allocation two estimators of the maximum mean are formed
//! ([`estimators`]): the grand average of every sample (GA) and the sample mean of
//! the most-sampled arm (LSA), each with a plug-in variance estimate and a normal
//! confidence interval. [`testing`] turns those into a single one-sided test of
//! "some arm beats a known control", next to a Bonferroni-corrected benchmark.
//! [`harness`] replicates whole pipelines with independent seeded streams and
//! aggregates bias, spread, MSE and coverage. [`riskmodel`] provides the 256-arm
//! option-portfolio scenario set and [`cli`] the command-line front end.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod normal;
pub mod policy;
pub mod riskmodel;
pub mod rng;
pub mod systems;
pub mod testing;

pub use error::{Error, Result};

pub use policy::{BanditState, ExplorationRate, PolicyConfig};
pub use rng::RngStream;
pub use systems::SystemSpec;
