//! Multi-view normal integration on a hash-encoded neural SDF.
//!
//! The pipeline optimizes a signed distance field so that its volume-rendered
//! normals and opacities match posed input normal maps and masks. Spatial
//! gradients of the field can be taken three ways — exact differentiation of
//! the network, axis-aligned finite differences, or directional finite
//! differences that reuse the volume-rendering samples — and the whole engine
//! is instrumented so the cost of each backend can be compared.

pub mod error;
pub mod field;
pub mod geometry;
pub mod grad;
pub mod mesh;
pub mod pipeline;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
