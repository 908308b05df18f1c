//! SoftSAE: a sparse autoencoder whose number of active latents is predicted
//! per input and enforced through a differentiable soft top-k during training
//! and an exact top-k at inference.
//!
//! Module map:
//! - [`soft_topk`]: the selection operator, its exact vector-Jacobian product, hard top-k
//! - [`model`]: parameters, the forward pass in its three gating modes, hand-written backward
//! - [`objective`]: reconstruction, sparsity budget and auxiliary dead-latent losses
//! - [`trainer`]: schedules, Adam, the soft-then-hard training loop, metrics
//! - [`checkpoint`]: binary checkpoint format
//! - [`datagen`] / [`dataio`]: synthetic activations with known complexity, the activation file format
//! - [`eval`]: FVE, L0, k-hat statistics, rank correlation against ground truth
//! - [`gradcheck`]: finite-difference verification suite

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod soft_topk;
pub mod trainer;

pub use config::{PenaltyKind, ScheduleKind, TrainConfig, TrainMode};
pub use error::{Result, SaeError};
pub use model::{ForwardTrace, Gating, SaeParams};
pub use objective::{DeadFeatureTracker, LossBreakdown};
pub use soft_topk::{hard_topk, soft_topk_backward, soft_topk_forward, HardSelection, SoftTopKOutput};
pub use trainer::{MetricsRecord, TrainState};
