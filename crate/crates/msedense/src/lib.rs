//! Multitask squeeze-excitation DenseNet for five-stage severity grading.
//!
//! Everything numerical is built from scratch on a small reverse-mode
//! autodiff tape: densely connected convolutional backbones with
//! squeeze-excitation blocks, a classification head, a regression head, and
//! a fusion MLP over both backbones' pooled features. The crate also ships
//! the supporting pipeline: synthetic dataset generation, image loading and
//! augmentation, three-phase training, checkpointing, and ordinal
//! evaluation metrics.
//!
//! Heavy kernels are data-parallel over the batch (rayon, behind the
//! default `parallel` feature) and reduce in a fixed order, so parallel and
//! sequential runs produce bitwise-identical results.

pub mod data;
pub mod element;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use element::Element;
pub use tensor::{Tape, Tensor, TensorError, Var};
