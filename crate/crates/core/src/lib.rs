pub mod aha;
pub mod autograd;
pub mod camera_lift;
pub mod checkpoint;
pub mod cmki;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod voxelizer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
