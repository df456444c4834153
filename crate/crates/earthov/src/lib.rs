//! Open-vocabulary semantic segmentation for overhead imagery, desk scale.
//!
//! The crate builds the full pipeline from first principles on a small f64
//! autodiff core:
//!
//! - [`tensor`] / [`tape`] — dense tensors and reverse-mode differentiation;
//! - [`encoder`] — a ViT-style image encoder with the self-self attention
//!   surgery used for dense open-vocabulary prediction;
//! - [`upsampler`] — a guided joint-bilateral feature upsampler (one shared
//!   module applied repeatedly), its learnable downsampler and content
//!   retention network, and their reconstruction training losses;
//! - [`ovhead`] — global-bias correction of patch tokens and cosine
//!   classification against grouped text-embedding vocabularies;
//! - [`distill`] — cross-modal distillation of a radar encoder from a frozen
//!   optical teacher (contrastive + cosine + region losses);
//! - [`pipeline`] / [`metrics`] — raster IO, resize + sliding-window
//!   inference, confusion matrices and mIoU;
//! - [`commands`] — the operations behind the `earthov` binary.
//!
//! Start with the runnable examples (`cargo run --example ...`) for a tour of
//! each capability.

pub mod encoder;
pub mod error;
pub mod metrics;
pub mod netpbm;
pub mod gradcheck;
pub mod optim;
pub mod ovw1;
pub mod ovhead;
pub mod params;
pub mod raster;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod toydata;
pub mod upsampler;

pub use error::{Error, Result};
pub use params::Params;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
