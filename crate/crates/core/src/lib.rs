//! Estimation of heterogeneous, time-varying income volatility.
//!
//! Log income is decomposed into permanent and transitory shocks whose
//! variances differ across people and years. Those variances carry a
//! Markovian hierarchical Dirichlet process prior, and everything is
//! estimated with a three-step Gibbs sampler. The crate also carries the
//! data preparation and the classic sample-moment benchmarks.

pub mod error;
pub mod io;
pub mod model;
pub mod moments;
pub mod posterior;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod volatility;

pub use error::{Error, Result};
pub use model::{
    HyperParams, IncomeCoefficients, IndividualSeries, IndividualShocks, Observation, PanelData,
    PanelRecord, ShockPanel, SigmaPair,
};
pub use volatility::{ClusterId, VolatilityState};
