//! Continuous-time visual-inertial odometry for rolling-shutter cameras.
//!
//! The body trajectory is a uniform cumulative cubic B-spline (rotation and
//! position split), estimated in a keyframe sliding window from per-row
//! timestamped feature observations and raw IMU samples. The camera line
//! delay is estimated online alongside the trajectory.

pub mod config;
pub mod error;
pub mod factors;
pub mod lie;
pub mod optimizer;
pub mod sim;
pub mod dataset;
pub mod estimator;
pub mod eval;
pub mod io;
pub mod sensors;
pub mod spline;

pub use error::*;
