//! EEG foundation-model toolkit built on selective state-space blocks.
//!
//! ```text
//! EDF + annotations ─ ingest ─ notch · resample · window · z-score ─▶ window cache
//!                                                                      │
//!   front conv (k=100, shared) · channel mix · Mamba blocks ◀──────────┘
//!        │ U-Net down (double conv, mean pool) ··· bottleneck Mamba blocks
//!        │                                            ├─▶ max-pool · 2 linear ─▶ P(seizure)
//!        └ U-Net up (transpose conv, skip concat, double conv, Mamba) ─▶ zero-init 1×1 conv ─▶ x̂
//! ```
//!
//! Training runs in two stages: reconstruction pretraining with MSE plus a
//! magnitude-spectrum loss, then detection fine-tuning with BCE. The
//! [`interpret`] module derives channel saliency and front-end filter spectra
//! from a checkpoint.

pub mod error;
pub mod gradcheck;
pub mod ingest;
pub mod interpret;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
