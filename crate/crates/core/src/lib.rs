// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod archive;
pub mod autodiff;
pub mod decomposition;
pub mod error;
pub mod intervention;
pub mod masking;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod toy;

pub use error::{DlensError, Result};
pub use tensor::Tensor;
