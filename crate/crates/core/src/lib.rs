//! Counterfactual learning to rank from position-biased click logs.
//!
//! The crate simulates click logs from supervised ranking data under a
//! position-bias examination model and learns linear rankers from them with
//! three estimators:
//!
//! - `Biased`: plain SGD on clicks, ignoring propensities,
//! - `IpsSgd`: uniform sampling with gradients weighted by `1/p_i`,
//! - `CounterSample`: sampling clicks proportionally to `1/p_i` with an alias
//!   table and scaling every gradient by the constant mean weight `M̄`.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file pin the `f64` instantiation used by the CLI.

pub mod dataset;
pub mod experiment;
pub mod objectives;
pub mod optimization;
pub mod ranking;
pub mod sampling;
pub mod scalar;
pub mod simulation;
pub mod toy_regression;

pub use dataset::{Dataset, DatasetError, Document, Query};
pub use objectives::{Gradient, HingeConfig};
pub use optimization::{
    Method, OptimizerKind, TheoryParams, TrainConfig, TrainError, TrainResult,
};
pub use ranking::{LinearModel, RankWeighting, RankedList, RankingError};
pub use sampling::{AliasTable, SamplingDistribution, SamplingError};
pub use scalar::Scalar;
pub use simulation::{BiasConfig, ClickLog, ClickLogEntry, SimulationError};
pub use toy_regression::ToyProblem;

pub type Dataset64 = Dataset<f64>;
pub type Query64 = Query<f64>;
pub type LinearModel64 = LinearModel<f64>;
pub type ClickLog64 = ClickLog<f64>;
pub type AliasTable64 = AliasTable<f64>;
pub type TrainConfig64 = TrainConfig<f64>;
pub type TrainResult64 = TrainResult<f64>;
pub type ToyProblem64 = ToyProblem<f64>;

pub type Dataset32 = Dataset<f32>;
pub type LinearModel32 = LinearModel<f32>;
pub type ClickLog32 = ClickLog<f32>;
