//! Steady two-dimensional Navier-Stokes flow in a channel with an immersed
//! body: solenoidal extensions, Taylor-Hood finite elements, two lift
//! formulas and the equilibrium offset of a body held by a restoring force.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: channel, body shapes, placement, extents and gaps.
//! - [`extension`]: closed-form divergence-free fields built from cut-offs.
//! - [`mesh`]: graded boundary-fitted triangulations of the fluid domain.
//! - [`linsys`]: sparse matrices, direct and Krylov solvers.
//! - [`ns_solver`]: the mixed finite element flow solver.
//! - [`lift`]: boundary and volume lift evaluation.
//! - [`fsi`]: restoring forces, equilibria, sweeps and certificates.

pub mod extension;
pub mod fem;
pub mod fsi;
pub mod geometry;
pub mod lift;
pub mod linsys;
pub mod mesh;
pub mod ns_solver;
pub mod quadrature;
