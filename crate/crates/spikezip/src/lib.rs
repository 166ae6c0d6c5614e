//! Compressed, low-latency spiking neural networks.
//!
//! The pipeline has three stages plus profiling:
//!
//! 1. **Attention-guided sparse ANN training** — a BN-free VGG-style network
//!    is trained under a fixed global parameter density; per-epoch magnitude
//!    pruning and momentum-ranked regrowth move capacity between layers,
//!    while an attention-transfer loss against a frozen unpruned meta model
//!    keeps early training stable.
//! 2. **ANN-to-SNN conversion** — weights are copied into a spiking network
//!    and per-layer firing thresholds are calibrated sequentially from the
//!    percentile of observed pre-activation inputs.
//! 3. **Sparse SNN fine-tuning** — a few epochs of surrogate-gradient
//!    training jointly adapt the non-zero weights, per-layer thresholds, and
//!    per-layer membrane leaks at a small number of time steps.
//! 4. **Profiling** — spike activity, FLOPs for dense/compressed ANN/SNN
//!    variants, and an accumulate-vs-multiply-accumulate energy model.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability; the `spikezip` binary exposes the same pipeline as four
//! subcommands (`train-ann`, `convert`, `train-snn`, `profile`).

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod snn;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
