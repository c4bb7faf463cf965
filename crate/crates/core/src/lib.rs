//! Finite-element machinery for the H-formulation of eddy currents in
//! high-temperature superconductors.
//!
//! The crate is `no_std` (it needs `alloc`). It covers:
//!
//! * [`mesh`]: forests of quadtrees/octrees over a tensor-product root grid,
//!   with 2:1 balancing and hanging-entity classification;
//! * [`element`] and [`space`]: first-kind Nédélec edge elements of order
//!   1 to 3 on quadrilaterals and hexahedra, hanging and Dirichlet constraints;
//! * [`materials`]: power-law, Kim and lift-factor resistivity laws with their
//!   tangents;
//! * [`assembly`]: the eliminated, constrained θ-scheme residual and Jacobian;
//! * [`solver`]: Newton–Raphson with cubic backtracking, adaptive time stepping
//!   and the sparse linear solvers;
//! * [`gradient`]: gradients of the nodal space, which keep states weakly
//!   divergence-free against round-off;
//! * [`postproc`]: current density, magnetization, AC losses and line profiles.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assembly;
pub mod element;
pub mod gradient;
mod error;
pub mod linalg;
pub mod materials;
pub mod math;
pub mod mesh;
pub mod postproc;
pub mod quadrature;
pub mod solver;
pub mod space;
pub mod sparse;

pub use error::{Error, Result};

/// Vacuum permeability μ0 in H/m.
pub const MU_0: f64 = 4.0e-7 * core::f64::consts::PI;

/// Points and vectors are always stored with three components; 2D problems
/// live in the `z = 0` plane and carry their scalar curl in the `z` slot.
pub type Vec3 = [f64; 3];
