//! Weakly semi-supervised 3D detection on synthetic scenes: a point-to-box
//! teacher with explicit positional queries and deformable RoI cross-modal
//! fusion, pseudo-label generation, a point-guided self-supervised student,
//! and nuScenes-style evaluation with the static-properties detection score.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod student;
pub mod teacher;
pub mod types;

pub use error::{Error, Result};
