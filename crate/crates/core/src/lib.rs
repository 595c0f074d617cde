//! Semantic-segmentation laboratory: a small reverse-mode autodiff engine,
//! the layers UNet, ENet and BoxENet need (including box convolution over
//! integral images), soft-Dice training with ADAM, overlap metrics, a
//! synthetic mast-cell scene generator and a latency benchmark harness.

pub mod architectures;
pub mod autodiff;
pub mod bench;
pub mod boxconv;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{grad_check, GradCheckReport, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Init, Tensor};
