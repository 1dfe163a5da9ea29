//! Modality-aware activation pruning for multimodal transformer backbones.
//!
//! Weights are scored Wanda-style, `|W_ij| · ‖X_j‖₂`, where the channel
//! norms come from a calibration pool that keeps every text token and only
//! the visual tokens whose hidden states move the most inside each block.
//! The crate also carries a modality-decoupled probe for measuring how
//! sensitive each pathway is to the calibration pool.

pub mod calibration;
pub mod error;
pub mod evalgen;
pub mod io;
pub mod model;
pub mod mot;
pub mod numerics;
pub mod pruner;
pub mod saliency;

pub use calibration::{PoolKind, PoolPolicy};
pub use error::{AtvError, Result};
pub use model::{LayerKind, Modality, Model, ModelConfig, TokenSequence};
pub use numerics::Matrix;
pub use pruner::{run_atv_pipeline, ComparisonGroup, PipelineConfig, PruneMask, SparsityPattern};
pub use saliency::SaliencySignal;
