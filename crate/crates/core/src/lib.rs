//! Monocular visual odometry that optimizes photometric and geometric
//! residuals jointly, with a synthetic-scene harness for verification.

pub mod features;
pub mod geometry;
pub mod image_pyramid;
pub mod residuals;
pub mod joint_tracker;
pub mod mapper;
pub mod harness;
