//! Cooperative multi-agent BEV perception at desk scale.
//!
//! The pipeline: multimodal encoders lift point clouds and images into BEV
//! feature pyramids per agent; a dual-layer deformable cross-attention module
//! fuses ego and cooperative views per modality; a query-based decoder emits
//! detections with persistent track identities; a frame-delay channel models
//! V2X latency; and detection/tracking metrics close the loop over synthetic
//! scenarios generated in-repo.

pub mod attention;
pub mod config;
pub mod error;
pub mod experiment;
pub mod features;
pub mod geom;
pub mod imagebev;
pub mod nn;
pub mod pointpillars;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sim;
pub mod train;

pub mod tracker;

pub use error::{Error, Result};
