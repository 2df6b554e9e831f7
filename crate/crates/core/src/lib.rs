//! Super-resolution reconstruction of fluctuating-fluorophore image stacks.
//!
//! Reconstruction runs in two stages. The support of the emitters is found
//! as the sparse solution of a fit in the covariance domain, together with
//! the noise variance. Intensities and a smooth background are then
//! estimated on that support, with the smoothing weight picked by the
//! discrepancy principle. A simulator for blinking-emitter acquisitions and
//! the evaluation metrics used to score reconstructions are included.

pub mod covariance;
pub mod error;
pub mod eval;
pub mod grid;
pub mod intensity;
pub mod io;
pub mod operators;
pub mod simulate;
mod solver;
pub mod support;

pub use covariance::{empirical_covariance, empirical_mean, CovarianceData, ImageStack, StackHeader};
pub use error::{Error, Result};
pub use grid::Support;
pub use intensity::{IntensityProblem, IntensityResult, IntensitySettings};
pub use operators::{ForwardModel, Psf};
pub use simulate::{preset, BleachClock, Preset, SimulatedDataset, SimulationConfig};
pub use support::{Regularizer, RegularizerKind, SolverOptions, SupportProblem, SupportResult};
