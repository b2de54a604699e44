// SPDX-License-Identifier: Apache-2.0

//! Simulation of neural-network inference on charge-trap memory crossbars.
//!
//! Networks are trained digitally (optionally with noise injected into the
//! activations), their weights are programmed onto differential device
//! arrays, and inference is run through the analog model with read noise,
//! programming error, retention drift and finite converter resolution.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod device;
pub mod error;
pub mod harness;
pub mod net;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod xbar;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
