//! Dual-representation point cloud segmentation.
//!
//! Point features and sparse voxel features are refined in alternation:
//! points are pooled into voxels at several scales, voxels are processed
//! with submanifold sparse convolutions, and voxel features are gathered
//! back onto points with geometry-conditioned attention. Everything is
//! differentiated by the small tape in [`autograd`].

pub mod augment;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gafe;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scatter;
pub mod spvfe;
pub mod svpfe;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{DriNet, Head, ModelConfig, SegmentationOutput};
pub use params::{ParamId, ParamStore, Parameter};
pub use scatter::ScatterReduce;
pub use tensor::Tensor;
pub use voxel::{voxelize, PointCloud, VoxelCoord, VoxelMap, VoxelPyramid};
