#![no_std]
extern crate alloc;

pub mod attribution;
pub mod error;
pub mod evalkit;
pub mod grad;
pub mod image;
pub mod label;
pub mod network;
pub mod ops;
pub mod rten;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{GrayImage, RgbImage};
pub use label::Label;
pub use tensor::Tensor;
