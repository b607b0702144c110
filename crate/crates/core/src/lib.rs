//! Pinhole-to-panoramic unsupervised domain adaptation for semantic
//! segmentation.

pub mod adapt;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod scene;
pub mod segmenter;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
