//! Finite-element Bloch-Torrey simulation with permeable interior faces, and
//! gradient-based recovery of impermeable barriers from diffusion signals.

pub mod eigen;
pub mod encoding;
pub mod error;
pub mod expm;
pub mod fem;
pub mod forward;
pub mod io;
pub mod field;
pub mod inversion;
pub mod mesh;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod shapes;

pub use faer;
pub use faer::c64;

pub use error::{Error, Result};
pub use fem::{CouplingStructure, DofMap, OperatorSet, PhysicalParams};
pub use field::{InterfaceSet, PermeabilityField, Reparam};
pub use forward::{ReducedModel, SignalSet};
pub use inversion::{run_inversion, InversionConfig, Problem};
pub use mesh::{build_ambient_grid, Mesh, Point};
pub use shapes::ShapeSpec;
