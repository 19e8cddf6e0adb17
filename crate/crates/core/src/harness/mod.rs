//! Training, evaluation, ablations and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod optim;
pub mod train;
pub mod verify;
