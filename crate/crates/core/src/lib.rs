//! NIR-to-RGB colorization with padded four-direction selective scans,
//! built on an in-crate tensor and reverse-mode autodiff core generic over
//! `f32` and `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod autodiff;
pub mod autoencoder;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod color;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Padding, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
