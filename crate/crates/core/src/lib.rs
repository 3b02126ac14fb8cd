//! Solvers for discounted teams of agents grouped into exchangeable clusters.
//!
//! The crate builds the same control problem at three levels:
//! the finite team over joint states ([`exact`]), the team lifted to
//! per-cluster empirical measures ([`empirical`]), and the limiting
//! mean-field control problem over products of simplices ([`meanfield`]).
//! [`induction`] turns a mean-field policy back into decentralized agent
//! policies and [`verify`] runs the exchangeability and chaos experiments.

pub mod benchmarks;
pub mod cli;
pub mod combinatorics;
pub mod empirical;
pub mod error;
pub mod exact;
pub mod generate;
pub mod induction;
pub mod meanfield;
pub mod measure;
pub mod model;
pub mod output;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use measure::{tv_distance, MeasureArray, SimplexVector};
pub use model::{Horizon, PopulationLayout, TeamSpec, TeamSpecDoc};
