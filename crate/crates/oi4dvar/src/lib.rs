//! Observation sensitivity and observation impact for shallow-water 4D-Var.
//!
//! The crate is organised around a matrix-free pipeline:
//!
//! * [`state`] — cell-centered periodic grid, packed state vectors, CSV I/O.
//! * [`model`] — 2D shallow-water dynamics (two-stage Lax-Wendroff) together
//!   with its hand-derived tangent-linear, adjoint, and second-order adjoint.
//! * [`covariance`] — background and observation error statistics.
//! * [`observations`] — observation sets, selection operators, synthetic data.
//! * [`fourdvar`] — cost/gradient/Hessian-vector products and L-BFGS analysis.
//! * [`operators`] / [`dense`] — CG, Lanczos, orthonormalisation, and the small
//!   dense factorisations the low-rank algorithms reduce to.
//! * [`obs_impact`] — supersensitivity, observation sensitivity, the full
//!   impact matrix at oracle scale, and two low-rank approximations of it.
//!
//! Everything larger than a state vector stays an operator: the model enters
//! only through forward/tangent/adjoint runs, and the 4D-Var Hessian only
//! through products with vectors.

pub mod covariance;
pub mod dense;
pub mod dual;
pub mod fourdvar;
pub mod lbfgs;
pub mod model;
pub mod obs_impact;
pub mod observations;
pub mod operators;
pub mod state;
pub mod vecmath;
