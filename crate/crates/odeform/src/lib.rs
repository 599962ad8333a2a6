//! Self-intersection-free cortical-style surface reconstruction from
//! volumetric images.
//!
//! The crate covers the full path from a voxel label mask to a watertight
//! triangle mesh: signed distance transforms, topology correction,
//! isosurface extraction, mesh conditioning, and a learned stationary
//! velocity field integrated as an ODE to deform one surface into another
//! without self-intersections.

mod error;
mod vec3;

pub mod bvh;
pub mod flow;
pub mod intersect;
pub mod marching;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod sdf;
pub mod synth;
pub mod topology;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
