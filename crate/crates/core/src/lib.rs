//! Activation decomposition for explaining deep metric-learning models.
//!
//! A small CNN inference core produces a feature map `A` and an embedding
//! `E`. The head after `A` is linearized at its operating point so that
//! `E = sum_ij W_ij A_ij + B`, and the similarity of two embeddings is split
//! into point-to-point, bias and pure-bias terms. On top of that sit overall
//! and point-specific activation maps, closed-form Grad-CAM for comparison,
//! localization and orientation harnesses, and interactive retrieval.

pub mod decompose;
pub mod error;
pub mod evaluate;
pub mod format;
pub mod gradcam;
pub mod linearize;
pub mod nn;
pub mod render;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use decompose::{
    decompose_pair, ActivationMap, DecompositionResult, MapVariant, Side, SimilarityReport,
};
pub use error::{Error, Result};
pub use linearize::{linearize_head, LinearizedHead};
pub use nn::{forward, ForwardTrace, Layer, Model};
pub use tensor::Tensor;
