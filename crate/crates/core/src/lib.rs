//! Curved-trajectory transport tomography toolkit.
//!
//! Simulates stationary particle transport with absorption and scattering
//! along Hamiltonian trajectories bent by an external force, computes the
//! attenuated ray transform along those trajectories together with exact and
//! continuous adjoints, and reconstructs the interior source from outgoing
//! boundary measurements. Structural identities of the model (energy
//! conservation, the phase-volume/boundary integral identity, adjoint
//! consistency, fixed-point well-posedness) ship as runnable diagnostics.
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`];
//! f64 aliases for the main types are exported at the crate root.

pub mod boundary;
pub mod config;
pub mod dense;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod par;
pub mod phantom;
pub mod ray;
pub mod reconstruct;
pub mod scalar;
pub mod scatter;
pub mod trajectory;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default concrete scalar used by the CLI and file formats.
pub type Real = f64;

pub type Domain64 = geometry::Domain<Real>;
pub type ForceField64 = geometry::ForceField<Real>;
pub type EnergyShell64 = geometry::EnergyShell<Real>;
pub type PhaseState64 = geometry::PhaseState<Real>;
pub type SpatialGrid64 = grid::SpatialGrid<Real>;
pub type GridImage64 = grid::GridImage<Real>;
pub type SourceImage64 = grid::SourceImage<Real>;
pub type PhaseGrid64 = grid::PhaseGrid<Real>;
pub type PhaseFunction64 = grid::PhaseFunction<Real>;
pub type Trajectory64 = trajectory::Trajectory<Real>;
