//! Free-field realization of affine type-A Lie algebras together with the
//! elliptic kernels, one-loop correlation blocks, and flatness-equation
//! residual checks built on top of it.
//!
//! Module map:
//! - [`scalar`]: exact rationals, a small symbolic polynomial ring in the
//!   level and normalization constants, and the numeric scalar trait.
//! - [`lie`]: type-A root systems, structure constants, invariant form.
//! - [`poly`]: polynomials over the big-cell coordinates and first-order
//!   differential operators.
//! - [`flagdiff`]: the differential-operator realization and screenings.
//! - [`special`]: odd Jacobi theta function, elliptic kernels, eta products.
//! - [`fock`]: bosonic/ghost Fock states and exact mode actions.
//! - [`wakimoto`]: free-field currents, energy-momentum fields, and the
//!   commutation-relation verifier.
//! - [`corr`]: one-loop (torus) correlation functions of vertex operators,
//!   screened ghost blocks, and brute-force trace oracles.
//! - [`kzb`]: the elliptic connection kernels, the heat-kernel term, cycle
//!   quadrature, and residual checks for the flatness equations.

pub mod corr;
pub mod flagdiff;
pub mod fock;
pub mod kzb;
pub mod lie;
pub mod poly;
pub mod scalar;
pub mod special;
pub mod wakimoto;
