//! Simulation of follow-up structural MR volumes from two prior time-points.
//!
//! The pipeline registers serial scans with a symmetric demons solver, turns
//! the recovered displacement fields into Jacobian-determinant morphometry
//! maps, matches a target patient against a template population by masked
//! map distances, and synthesizes the follow-up volume by resampling the
//! latest scan with a kernel-weighted average of the best-matched templates'
//! follow-up deformations.
//!
//! All volumes, masks, fields and maps live on a single shared voxel grid;
//! mixing grids is a hard error everywhere. Types are immutable after
//! construction and every operation is a pure function.

pub mod error;
pub mod field;
pub mod harness;
pub mod morphometry;
pub mod nifti;
pub mod phantom;
pub mod registration;
pub mod simulation;
pub mod volume;

pub use error::{Error, Result};
pub use field::{compose, invert, jacobian_map, warp, DisplacementField3, InversionResult};
pub use morphometry::{intensity_distance, vbm_distance, VbmMap};
pub use registration::{
    check_inverse_consistency, register_symmetric, RegistrationParams, RegistrationResult,
};
pub use simulation::{
    average_followup_field, combine_distances, normalize_distances, select_neighbors,
    simulate_followup, DistanceTable, SimulationConfig, TargetPair, TemplateRecord, Transport,
    WeightingMode,
};
pub use volume::{Grid3, Mask3, Volume3};
