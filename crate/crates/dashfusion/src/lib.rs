//! From-scratch multimodal sentiment regression on a reverse-mode tape:
//! dual-stream alignment (cross-modal attention onto the text timeline plus
//! text-anchored contrastive alignment), supervised contrastive learning
//! with hard-negative retrieval, and hierarchical bottleneck fusion with
//! per-layer token halving.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`]: dense f64 tensors, the Wengert tape, parameters, and the
//!   finite-difference gradient checker.
//! - [`attention`]: scaled dot-product attention blocks and the post-norm
//!   transformer layer.
//! - [`model`]: modality encoders, temporal alignment, the bottleneck
//!   fusion stack and its alternatives, and the prediction head.
//! - [`contrastive`]: NT-Xent terms, the cosine similarity index, pair
//!   retrieval, and the joint objective.
//! - [`synth`]: the synthetic dataset generator and the bit-exact on-disk
//!   formats.
//! - [`train`]: Adam, the training loop, metrics, compute-cost reports,
//!   and ablations.
//!
//! The `parallel` feature (default) runs dataset generation, evaluation
//! fan-out, and finite-difference sweeps on rayon; disabling it falls back
//! to identical sequential code paths.

pub mod attention;
pub mod cli;
pub mod contrastive;
pub mod error;
pub mod model;
pub mod par;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
