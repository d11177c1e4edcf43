//! Desk-scale laboratory for superpixel sample-gradient model stealing.
//!
//! The pipeline: train a small victim network, wrap it as a black-box
//! oracle with a query ledger and an optional query-distribution monitor,
//! estimate its per-superpixel sample gradients by forward differences,
//! purify them by extremum thresholding, and train a proxy that imitates
//! both the victim's outputs and its purified gradients. Evaluation covers
//! query cost, monitor evasion, proxy agreement, and adversarial transfer.

pub mod adversarial;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod pnm;
pub mod prada;
pub mod proxy;
pub mod sgmap;
pub mod sgp;
pub mod spgq;
pub mod superpixel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
