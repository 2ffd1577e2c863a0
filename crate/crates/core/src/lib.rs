//! Geodesic matching of closed planar curves with a variational
//! particle-mesh discretization.
//!
//! Curves are carried by particles with positions and momenta; velocity
//! fields live on a periodic mesh and are coupled to the particles through
//! cubic B-spline transfer. Matching is done by shooting: the initial normal
//! momenta are optimized so that the end of the discrete geodesic minimizes a
//! kernel mismatch between geometric currents.
//!
//! Modules, bottom up:
//!
//! - [`mesh_ops`]: mesh fields, B-spline transfer, spectral operators
//! - [`shape`]: particle curves, normals, generators, CSV I/O
//! - [`geodesic_flow`]: the implicit symplectic integrator and diagnostics
//! - [`current_matching`]: the current mismatch functional and its gradient
//! - [`shooting`]: objective, adjoint gradient and optimizers
//! - [`cli`]: configuration, run orchestration and output files

pub mod cli;
pub mod current_matching;
pub mod geodesic_flow;
pub mod mesh_ops;
pub mod shape;
pub mod shooting;

pub use geodesic_flow::{Flow, FlowError, FlowSettings, PhaseState, TimeGrid, Trajectory};
pub use mesh_ops::{MeshConfig, MeshField, NormOperator, Spectral, Vec2};
pub use shape::{ParticleCurve, ShapeKind};
