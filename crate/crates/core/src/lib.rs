//! Fully discrete approximation of the stochastic transport equation
//!
//! `dX = (a dX/dx + F(X)) dt + G(X) dL` on `(0, 1)`, inflow at `x = 1`,
//!
//! driven by a normal-inverse-Gaussian Levy field with Matérn spatial
//! covariance. Time stepping is backward Euler, space is discretized by
//! discontinuous piecewise-linear trial functions paired with the optimal
//! Petrov-Galerkin test space, and the noise is a truncated Karhunen-Loève
//! expansion. The [`harness`] module estimates strong convergence rates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod harness;
pub mod levy;
pub mod mesh;
pub mod petrov;
pub mod quadrature;
pub mod solver;
pub mod sparse;
pub mod special;

pub use covariance::{matern_kernel, nystrom_eigendecomposition, KlDecomposition, MaternSpec};
pub use error::{Error, Result};
pub use harness::{equilibrate, fit_rate, run_convergence_study, ConvergenceReport, GammaMode, StudyConfig};
pub use levy::{char_function_gh, LevySampler, NigParams, NoiseBasis};
pub use mesh::{broken_norm, build_mesh, project_l2, DgFunction, Mesh1D};
pub use petrov::{assemble, bilinear_bh, compress, test_function, SchemeMatrices};
pub use solver::{exact_deterministic_solution, homogenize, initial_condition, solve_path, ForwardModel};
pub use special::bessel_k;
