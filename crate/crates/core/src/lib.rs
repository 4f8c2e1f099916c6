//! Mamba-in-Mamba infrared small target segmentation, computational core.
//!
//! Everything here is pure computation over in-memory buffers and builds
//! without `std`: the dense-array autodiff engine ([`graph`]), the selective
//! state space scan ([`ssm`]), the quad-directional 2D scan and visual Mamba
//! block ([`ss2d`]), the nested word/sentence network ([`arch`]), FLOPs
//! accounting ([`complexity`]), evaluation metrics ([`metrics`]), the
//! synthetic target generator ([`synth`]) and the optimizer/loss ([`train`]).
//!
//! File formats, dataset directories and the command line live in the `mim`
//! companion crate.

#![cfg_attr(not(test), no_std)]

#[cfg(feature = "std")]
extern crate std;

extern crate alloc;

pub mod arch;
pub mod complexity;
mod error;
pub mod gradcheck;
pub mod graph;
mod math;
pub mod metrics;
pub mod params;
pub mod ss2d;
pub mod ssm;
pub mod synth;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Precision, Tensor};
