//! Evolutionary search over symmetric convolutional autoencoders.
//!
//! The crate is organised bottom-up:
//!
//! * [`cgp`] – grid genotype, decoding of the active path and the mutation operators.
//! * [`arch`] – expansion of an encoder path into a full symmetric network, shape
//!   tracing and the `C(F,k)` / `CS(F,k)` architecture strings.
//! * [`nn`] – a small CPU tensor engine (convolution, transposed convolution, ReLU,
//!   skip addition, MSE) with ADAM and a finite-difference gradient checker.
//! * [`data`] – image ingestion, splits, patches, corruption models and synthetic sets.
//! * [`metrics`] – PSNR and SSIM.
//! * [`evolution`] – the (1+λ) strategy, fitness evaluation, fine-tuning and checkpoints.

pub mod arch;
pub mod cgp;
pub mod data;
pub mod error;
pub mod evolution;
pub mod metrics;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
