//! Co-supervised encoder-decoder segmentation for lung CT infections.
//!
//! The crate provides:
//!
//! - [`backbone`]: residual U-shaped encoder-decoder producing five encoder
//!   and five decoder feature maps;
//! - [`supervision`]: edge and semantic supervision heads over any stage,
//!   plus edge ground-truth derivation from masks;
//! - [`afm`]: attention-gated fusion of the decoder pyramid with add/concat
//!   baselines;
//! - [`losses`]: Dice-family losses and the weighted joint objective;
//! - [`metrics`]: Dice / Sensitivity / Precision / MAE / Structure Measure /
//!   mean Enhanced-alignment Measure;
//! - [`dataio`]: slice-pair ingestion, preprocessing and a synthetic lesion
//!   generator for desk-scale runs;
//! - [`harness`]: training/evaluation driver, ablation grids and the fusion
//!   comparison;
//! - [`grad`]: the small tape-based autodiff engine everything runs on.

pub mod afm;
pub mod backbone;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod grad;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod supervision;

pub use error::{Error, Result};
