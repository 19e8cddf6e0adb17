//! CLIP-guided cross-domain cross-modal video question answering at desk
//! scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff and transformer layers.
//! * [`keyframe`]: color-histogram key-frame selection.
//! * [`encoders`]: the target-domain video (divided space-time attention)
//!   and question encoders.
//! * [`clip`]: the general-domain dual encoder, prompts and contrastive
//!   pretraining.
//! * [`fusion`]: the shared-weight cross-domain transformer, dot-product
//!   interactions, weighted fusion and answer decoding.
//! * [`model`]: the assembled network and its ablation modes.
//! * [`synth`]: a procedural moving-shape VideoQA dataset.
//! * [`harness`]: optimizer, training, evaluation, ablations, checkpoints.

pub mod clip;
pub mod encoders;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod harness;
pub mod keyframe;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
