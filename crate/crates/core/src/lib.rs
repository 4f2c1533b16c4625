//! Edge space-object detection toolkit.
//!
//! A dense autograd engine ([`tensor`]), the GELAN / ViT / SE building blocks
//! ([`nn`]) and the three detector variants built from them ([`model`]), a
//! synthetic LEO imaging simulator ([`sim`]), COCO-style detection metrics
//! ([`metrics`]), toy-scale training ([`train`]) and an inference benchmark
//! harness ([`bench`]).

pub mod bench;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
