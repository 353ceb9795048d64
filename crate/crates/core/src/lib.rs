//! Simulation library for VCSEL-equipped reconfigurable intelligent surfaces:
//! optical localization of a user and cascaded mmWave link evaluation.

pub mod config;
pub mod error;
pub mod experiments;
pub mod ext;
pub mod geometry;
pub mod localization;
pub mod mmwave;
pub mod optical;
pub mod routing;

pub use error::{LerisError, Result};
pub use geometry::{Room, Vec3};
