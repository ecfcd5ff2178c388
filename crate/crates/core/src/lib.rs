//! Localization of occluded internal structures from single-view surface
//! point clouds with a conditional multi-class occupancy network.
//!
//! The crate covers the full desk-scale pipeline: synthetic label volumes
//! ([`phantom`]), pose augmentation ([`deform`]), a virtual depth camera
//! ([`sensor`]), training-target generation ([`sortsample`]), the network
//! and its training loop ([`occnet`]), hierarchical volumetric inference
//! ([`infer`]), box metrics ([`metrics`]) and an ICP template-matching
//! baseline ([`baseline`]). [`pipeline`] wires these into the batch
//! commands exposed by the `occloc` binary.

pub mod baseline;
pub mod deform;
pub mod error;
pub mod format;
pub mod infer;
pub mod metrics;
pub mod occnet;
pub mod phantom;
pub mod pipeline;
pub mod sensor;
pub mod sortsample;
pub mod volume;

pub use error::{Error, Result};

/// World/camera space point in meters.
pub type Point = nalgebra::Point3<f64>;
/// Displacement in meters.
pub type Vec3 = nalgebra::Vector3<f64>;
