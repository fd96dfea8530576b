//! Egocentric hand-object interaction detection at desk scale.
//!
//! The crate bundles the annotation model, a synthetic scene generator, a
//! small differentiable numeric kernel, the hand geometry and
//! interactivity refinement block, a set-prediction host model, inference
//! post-processing and the evaluation protocol.

pub mod annotation;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod hgir;
pub mod inference;
pub mod numeric;
pub mod pipeline;
pub mod scenes;

pub use error::{Error, Result};
