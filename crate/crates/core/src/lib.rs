//! Multi-task no-reference image quality assessment.
//!
//! A VGG-style backbone with non-affine instance normalization feeds two
//! heads: a distortion-type classifier on the stage-4 tap and a quality
//! regressor that fuses coarse score maps from the stage-4 and stage-5 taps.
//! Around the network sit a synthetic distortion generator, the patching and
//! splitting protocol, an Adam/SGD training loop and the rank-correlation
//! evaluation suite.
//!
//! Data-parallel loops (batched forward, per-image evaluation, dataset
//! synthesis, repeated splits) go through [`Exec`]; building without the
//! `parallel` feature turns every such loop sequential.

pub mod distort;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod patch;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{BackboneConfig, ForwardOutput, HeadVariant, Model, ModelConfig};
pub use nn::Real;
