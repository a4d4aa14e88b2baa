//! Systems of vector fields on fiber bundles, numerically.
//!
//! This crate realizes, at desk scale, the machinery connecting systems of
//! vector fields on a fiber bundle with connections, parallel transport,
//! curvature, holonomy, the bundle of connections with its universal
//! connection, and the reconstruction of a principal cocycle from transport
//! data. Everything is built from exact polynomial/affine families plus
//! fixed-step geometric integration, so each identity can be verified
//! against an independent oracle.

pub mod connection;
pub mod curve;
pub mod error;
pub mod geometry;
pub mod lie;
pub mod poly;
pub mod reconstruction;
pub mod report;
pub mod scenario;
pub mod system;
pub mod universal;

pub use error::{Error, Result};
