//! Amodal video segmentation from front-view and bird's-eye-view fusion.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod runner;
pub mod segnet;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use mask::{BinaryMask, PixelBox};
pub use params::{Bound, GradMap, ParameterStore};
pub use tensor::Tensor;
