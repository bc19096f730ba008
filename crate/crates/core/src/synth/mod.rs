//! Synthetic capture rig: scripted motions, pinhole cameras, virtual IMUs and
//! dataset files.

mod calib_capture;
mod camera;
mod dataset;
mod motion;
mod render;

use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::kinematics::KinematicsError;

pub use calib_capture::{calibration_poses, random_calibration, simulate_calibration};
pub use camera::{canonicalize, canonicalize_keypoints, project, project_unchecked, CameraModel, Rig, MIN_DEPTH};
pub use dataset::{simulate_dataset, Dataset, DatasetManifest, DatasetSpec, SequenceEntry, SequenceRecord, DATASET_FORMAT_VERSION};
pub use motion::{generate_motion, MotionKind};
pub use render::{
    assemble_input, finite_diff_acceleration, input_dim, render_observations, sensor_accelerations, FrameSample,
    ImuSample, KeypointObservation, NoiseSpec,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("need at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("no cameras")]
    NoCameras,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("missing sensor on bone {0}")]
    MissingSensor(usize),
    #[error("skeleton lacks joint {0:?}")]
    UnknownJoint(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
