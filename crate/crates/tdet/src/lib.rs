//! Temporal activity detection on feature videos.
//!
//! The toolkit implements a two-stage detector over 1-D time: a temporal
//! backbone turns a fixed-length frame buffer into a downsampled feature map,
//! a proposal subnet scores and regresses multiscale anchor segments, and a
//! classification subnet pools each surviving proposal into a fixed-size grid
//! and predicts its activity class together with refined boundaries. Both
//! subnets share the backbone features and train jointly from a single loss.
//!
//! Everything runs on the CPU on top of a small reverse-mode differentiation
//! substrate ([`autodiff`]); no external tensor framework is involved. The
//! [`data`] module generates seed-deterministic synthetic feature videos with
//! planted class patterns so the full train/detect/eval loop can be exercised
//! at desk scale.

pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod loss;
pub mod model;
pub mod roipool;
pub mod train;

pub use error::{Error, Result};
