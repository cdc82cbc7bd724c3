//! B-cos vision transformers and the tooling to inspect them.
//!
//! The crate provides:
//!
//! * [`autodiff`]: a define-by-run reverse-mode tape over dense `f64`
//!   [`tensor`]s, with ε-rule relevance propagation on the same graph;
//! * [`bcos`]: the B-cos* unit and its MaxOut-paired layer;
//! * [`attention`]: scaled dot-product, multi-head and (shifted) window
//!   attention with linear or B-cos projections;
//! * [`model`]: ViT, BvT, Swin-style and Bwin models, including variants
//!   whose last block attends globally, plus checkpoints;
//! * [`explain`]: attention-last, rollout, Grad-CAM, ε-LRP, transformer
//!   attribution and head-mass accumulation over an execution trace;
//! * [`cka`]: linear centered kernel alignment between hidden layers;
//! * [`train`]: losses, AdamW, cosine schedule with warm restarts, metrics
//!   and a reproducible training loop;
//! * [`data`]: netpbm image folders and a synthetic shapes dataset;
//! * [`cli`]: the `bvt` command-line driver.

pub mod attention;
pub mod autodiff;
pub mod bcos;
pub mod cka;
pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod model;
pub mod netpbm;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
