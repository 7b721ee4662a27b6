//! Neural-ODE networks with depthwise-separable convolutions, built for
//! deployment studies on on-chip-memory accelerators.
//!
//! The crate covers the full desk-scale workflow around the dsODENet model
//! family:
//!
//! - [`tensor`] / [`fixed`] — real tensors and exact Q-format fixed-point
//!   arithmetic with round-to-nearest-even and saturation.
//! - [`layers`] — forward and reverse-mode backward passes for every
//!   primitive layer (standard / depthwise / pointwise convolution, batch
//!   normalization, ReLU, fully connected, AddTime).
//! - [`model`] — ODEBlock and downsampling composition, Euler iteration, and
//!   declarative construction of ResNet / ODENet / dsODENet variants.
//! - [`params`] — exact parameter accounting and comparison reports.
//! - [`quant`] — conversion of trained float models to the 20/24-bit
//!   deployment scheme and measurement of the induced output deviation.
//! - [`memory`] — packing of parameter and feature-map arrays into BRAM/URAM
//!   instances of a device model.
//! - [`emulator`] — functional emulation of the accelerator's weight-transfer
//!   and feature-map-computation protocol, bit-exact against the quantized
//!   reference path.
//! - [`train`] / [`losses`] / [`data`] — the two-stage distillation domain
//!   adaptation pipeline with soft-target and CORAL losses, runnable at desk
//!   scale on a synthetic shifted-digit task.
//!
//! The `examples/` directory holds one runnable example per capability; the
//! `odeforge` binary exposes the same workflows as subcommands.

pub mod cli;
pub mod config;
pub mod data;
pub mod emulator;
pub mod error;
pub mod fixed;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod memory;
pub mod model;
pub mod params;
pub mod quant;
pub mod tensor;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
pub use tensor::Tensor;
