//! Visual-inertial human motion capture.
//!
//! Monocular 2D keypoints and a handful of body-worn IMUs are fused in two
//! stages: a stack of recurrent trackers regresses a skeletal motion, then a
//! Levenberg-Marquardt refinement polishes it against the raw observations.
//! A synthetic capture rig supplies training and evaluation data.

pub mod kinematics;
pub mod calibration;
pub mod io;
pub mod synth;
pub mod inference;
pub mod optimizer;
pub mod eval;
