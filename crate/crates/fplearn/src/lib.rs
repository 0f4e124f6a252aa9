//! Learn autonomous ODE/SDE velocity fields from the statistics of observed
//! trajectories.
//!
//! The toolkit treats the occupation measure of a trajectory as the inference
//! data and fits a parameterized velocity field so that the stationary
//! solution of the associated Fokker-Planck equation reproduces that measure.
//! The forward model is a first-order upwind finite-volume discretization
//! whose explicit update matrix is column-stochastic; gradients with respect
//! to the velocity parameters are obtained with the adjoint-state method, so
//! the cost per gradient is two banded linear solves regardless of how many
//! parameters the velocity model carries.
//!
//! Module map:
//!
//! - [`grid`]: rectangular uniform meshes, column-major indexing, CFL bound.
//! - [`measure`]: occupation measures, Gaussian smoothing, support masks.
//! - [`fvm`]: upwind operator assembly, stationary solves, density stepping.
//! - [`objective`]: L2 / KL / JS / entropic-W2 misfits and their gradients.
//! - [`velocity`]: piecewise-constant, polynomial and neural-net velocity
//!   models with face evaluation and sensitivity pullback.
//! - [`adjoint_opt`]: adjoint solves, parameter gradients, the training loop.
//! - [`dynamics`]: Euler-Maruyama simulation, benchmark systems, delay
//!   embedding.
//! - [`pipeline`]: three-step calibration against real data and density
//!   evolution for uncertainty quantification.
//! - [`io`]: versioned JSON/CSV artifact formats.
//!
//! All numerics are generic over the scalar type through [`Scalar`]; the
//! `*64` aliases at the crate root pin the concrete `f64` instantiations the
//! CLI and the test-suite use.

pub mod adjoint_opt;
pub mod dynamics;
pub mod error;
pub mod fvm;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod measure;
pub mod objective;
pub mod pipeline;
pub mod scalar;
pub mod velocity;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` grid.
pub type Grid64 = grid::Grid<f64>;
/// `f64` density field.
pub type Density64 = measure::DensityField<f64>;
/// `f64` face-velocity sample set.
pub type FaceVelocity64 = fvm::FaceVelocity<f64>;
/// `f64` Markov operator.
pub type MarkovOperator64 = fvm::MarkovOperator<f64>;
/// `f64` velocity model.
pub type VelocityModel64 = velocity::VelocityModel<f64>;
/// `f64` training configuration.
pub type TrainConfig64 = adjoint_opt::TrainConfig<f64>;
/// `f64` trajectory.
pub type Trajectory64 = dynamics::Trajectory<f64>;
