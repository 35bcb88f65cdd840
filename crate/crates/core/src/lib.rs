//! Semi-parametric regression for populations of dynamic networks.
//!
//! Each subject contributes a sequence of symmetric adjacency matrices over a
//! shared time grid, plus a covariate vector. Edges follow a canonical-link
//! exponential family whose linear predictor combines a low-rank baseline
//! tensor with group-sparse covariate effects expanded in a B-spline basis.

pub mod baselines;
pub mod cp;
pub mod dataset;
pub mod error;
pub mod family;
pub mod fit;
pub mod glm;
pub mod io;
pub mod network;
pub mod problem;
pub mod simulation;
pub mod spline;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use cp::{cp_decompose, cp_decompose_offdiagonal, CpDecomposition};
pub use dataset::{Adjacency, DynamicNetworkDataset};
pub use error::{Error, Result};
pub use family::Family;
pub use glm::ModelParams;
pub use spline::SplineBasis;
pub use tensor::{CpFactors, Tensor3, Tensor4};
pub use fit::{fit, tune, FitOptions, FitResult, LambdaSpec, TuneResult};
pub use network::{PermutationOptions, PermutationReport, SignalMatrix};
pub use simulation::{SimConfig, StudyOptions, StudyReport};
