//! Curiosity-driven analysis-by-synthesis.
//!
//! An encoder maps images to explicit scene codes, a differentiable soft
//! renderer re-synthesizes them, and an adversarial critic keeps the
//! re-renders on the data distribution so that a plain image loss cannot
//! collapse into degenerate solutions.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod train;
pub mod worlds;

pub use error::{Error, Result};
pub use image::Image;
pub use scene::{Group, GroupSet, SceneCode, SceneObject};
pub use worlds::WorldSpec;
