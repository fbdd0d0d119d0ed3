//! Group-wise fully quantized Winograd convolution.

pub mod bench;
pub mod cli;
pub mod conv_ref;
pub mod error;
pub mod golden;
pub mod kernels;
pub mod matrix;
pub mod quant;
pub mod tensor;
pub mod transforms;
pub mod tuner;
pub mod wino;

pub use error::{Result, WinoError};
pub use tensor::{Fill, RngSpec, Tensor};
pub use transforms::{Tile, WinogradTransform};
