//! Measurement machinery: similarity alignment, per-vertex errors, normal
//! angle distributions, corpus reports, pose sweeps and the direct-regression
//! baseline.

pub mod baseline;
pub mod metrics;
pub mod normals;
pub mod procrustes;
pub mod report;
