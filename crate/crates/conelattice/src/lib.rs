//! Lattice graphs driven by fields of double cones.
//!
//! Each lattice point x carries a double cone Γ(x); the directed graph G(Γ)
//! joins x to y when y - x ∈ Γ(x). On top of that the crate builds multiscale
//! path families with bounded length, congestion and edge-length ratios, and
//! uses them to compare nonlocal quadratic energies driven by cone-supported
//! kernels against the fractional energy.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaining;
pub mod configuration;
pub mod continuum;
pub mod forms;
pub mod geometry;
pub mod lattice_graph;

pub use chaining::{build_path_family, verify_path_family, FamilyOptions, PathFamily};
pub use configuration::{reduce_configuration, reference_cones, Configuration, Point, ReferenceFamily};
pub use geometry::{Cube, Direction, DoubleCone};
pub use lattice_graph::{build_graph, ConeGraph, LatticeBall};
