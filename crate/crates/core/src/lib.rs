pub mod checkpoint;
pub mod element;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image_ops;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod perceptual;
pub mod run_config;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tps;
pub mod training;

pub use element::Element;
pub use error::{Error, Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
