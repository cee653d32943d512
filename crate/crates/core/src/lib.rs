//! Odometry and elevation mapping for legged platforms carrying a low-mounted,
//! limited-FOV depth sensor.
//!
//! Incoming clouds are registered directly against a probabilistic elevation grid with a
//! robust point-to-plane ICP, the registration covariance accounts for noisy map normals,
//! the result corrects an error-state pose filter, and the grid is updated from the
//! a-posteriori camera pose.

pub mod dataset;
pub mod ekf;
pub mod elevation_map;
pub mod eval;
pub mod icp;
pub mod pipeline;
pub mod sim;
pub mod so3;
