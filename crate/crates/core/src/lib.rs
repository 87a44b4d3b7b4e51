//! Post-training quantization toolkit built around inversely-proportional
//! channel factorization.
//!
//! A network is held as a [`Graph`] of conv / depthwise layers. Output
//! channels of a layer can be rescaled by any positive factors as long as the
//! consuming layer's weights are divided by the same factors; the float
//! network is unchanged, but per-channel ranges can be equalized so that
//! layer-wise 8-bit quantization loses far less signal.
//!
//! Modules:
//! - [`tensor`]: channel-last tensors, convolutions, activations.
//! - [`graph`]: the DAG, batch-norm folding and execution.
//! - [`quant`]: calibration and fake quantization.
//! - [`equalize`]: factorization, one-step and two-step equalization, bias correction.
//! - [`noise`]: measured and predicted SQNR, optimal-equalization bounds.
//! - [`model_io`]: manifest + binary blob persistence.
//! - [`fixture`]: deterministic synthetic networks and sample streams.
//! - [`pipeline`]: the calibrate / equalize / quantize / analyze workflow behind the CLI.

pub mod activation;
pub mod equalize;
pub mod error;
pub mod fixture;
pub mod graph;
pub mod model_io;
pub mod noise;
pub mod pipeline;
pub mod quant;
pub mod stats;
pub mod tensor;

pub use activation::ActivationKind;
pub use error::{Error, Result};
pub use graph::{Graph, LayerNode, LayerOp, Node, NodeKind, Taps};
pub use quant::{BitWidths, CalibrationRecord, QuantMode, QuantSpec};
pub use tensor::{Padding, Tensor};
