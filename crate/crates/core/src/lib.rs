//! Core library for a small, fully self-contained masked-autoencoder
//! pipeline on multimodal retinal-style images: a reverse-mode autodiff
//! tape, a ViT encoder, MAE pretraining, classification fine-tuning, a tiny
//! LoRA-adapted VQA decoder, the data pipeline, and the evaluation protocol.
//!
//! Everything runs on CPU with deterministic seeding; no BLAS, no GPU, no
//! external ML runtime.

pub mod checkpoint;
pub mod classify;
pub mod data;
pub mod error;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vit;
pub mod vqa;

pub use error::{Error, Result};
pub use tensor::{grad_check, Scalar, Tape, TensorId, DEFAULT_GRAD_CHECK_EPS};
pub use vit::ViTConfig;
