//! Desk-scale adversarial-training laboratory for contour-attention
//! preserving (CAP) robust classification: a reverse-mode autodiff core, a
//! tiny vision transformer, self-guided edge-preserving filtering, attention
//! parameter regularization, white-box attacks, hybrid-distance objectives,
//! synthetic lung phantoms, and corruption/saliency evaluation.

pub mod apr;
pub mod attacks;
pub mod battery;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod filter;
pub mod fmt;
pub mod image;
pub mod meta;
pub mod objectives;
pub mod parallel;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{CapError, Result};
