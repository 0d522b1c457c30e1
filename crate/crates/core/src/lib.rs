//! Monocular visual ego-motion estimation.
//!
//! A weight-shared convolutional encoder turns each pair of consecutive frames
//! into a motion feature map, a stack of convolutional GRU cells carries that
//! motion context across the clip, and a small regression head emits the
//! relative 6-DoF pose of every pair. The crate also contains the training
//! losses, pose-consistent augmentations, KITTI-format data handling, a
//! synthetic sequence generator and the KITTI odometry metrics.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod objective;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
