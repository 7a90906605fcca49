//! Self-supervised point-cloud representation learning: geometric segmentation,
//! prototype-based segment grouping distilled from a momentum teacher, and a
//! confidence-weighted contrastive objective built on those groups.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod networks;
pub mod pointcloud;
pub mod rng;
pub mod segment;
pub mod trainer;

pub use error::{Error, Result};
pub use pointcloud::PointCloud;
