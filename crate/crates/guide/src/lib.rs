//! The chapters of the guide under `book/`, one module each, so that
//! `cargo test` runs every snippet in the book as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}
#[doc = include_str!("../../../book/src/extensions.md")]
pub mod extensions {}
#[doc = include_str!("../../../book/src/meshing.md")]
pub mod meshing {}
#[doc = include_str!("../../../book/src/linear_systems.md")]
pub mod linear_systems {}
#[doc = include_str!("../../../book/src/flow_solver.md")]
pub mod flow_solver {}
#[doc = include_str!("../../../book/src/lift.md")]
pub mod lift {}
#[doc = include_str!("../../../book/src/equilibria.md")]
pub mod equilibria {}
#[doc = include_str!("../../../book/src/command_line.md")]
pub mod command_line {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
