//! Anisotropic eikonal modeling of cardiac activation with geodesic-based
//! identification of earliest activation sites (EASs).
//!
//! The crate provides:
//! - simplicial meshes with P1/P0 field algebra and scenario generators
//!   ([`mesh`]),
//! - a Fast Iterative Method solver for the anisotropic eikonal equation
//!   with point-source Dirichlet embedding ([`eikonal`]),
//! - geodesic backtracking and distance gradients ([`geodesic`]),
//! - the Gauss–Newton fitting loop for activation-time measurements
//!   ([`optimizer`]),
//! - topological-gradient growth of the site count ([`topo`]),
//! - a lead-field ECG forward model and ECG-driven fitting ([`ecg`]),
//! - run configuration and experiment orchestration ([`config`]).
//!
//! See the `examples/` directory for runnable entry points per capability.

pub mod config;
pub mod ecg;
pub mod eikonal;
pub mod error;
pub mod geodesic;
pub mod linalg;
pub mod mesh;
pub mod optimizer;
pub mod sparse;
pub mod topo;

pub use error::{GeasiError, Result};
