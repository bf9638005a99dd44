//! GCRPNet: a selective-scan encoder/decoder with graph-attention skip
//! connections for salient object detection in optical remote sensing images.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gat;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, ResizeMode, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
