//! Multi-scale gradient capsule GAN for 8× single-slice MRI
//! super-resolution (28×28 → 224×224).
//!
//! The crate covers the whole pipeline: DICOM preprocessing ([`data`]),
//! capsule primitives ([`capsule`]), a frozen DenseNet feature extractor
//! ([`backbone`]), the residual multi-scale generator ([`generator`]), the
//! capsule patch discriminator ([`discriminator`]), adversarial training
//! ([`train`]) and evaluation including task-specific similarity
//! ([`eval`]). The `msrgan` binary wires these into a CLI ([`cli`]).

pub mod data;
pub mod discriminator;
pub mod error;
pub mod image;
pub mod nn;
pub mod util;
pub mod backbone;
pub mod capsule;
pub mod generator;
pub mod train;
pub mod eval;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
