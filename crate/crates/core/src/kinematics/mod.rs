//! Skeleton definition, rotation representations and forward kinematics.

mod fk;
mod pose;
pub mod rotation;
mod skeleton;

pub use fk::{forward_kinematics, forward_kinematics_euler, forward_kinematics_matrices, FkResult};
pub use pose::{
    euler_to_motion, euler_to_pose, motion_to_euler, pose_to_euler, EulerMotion, EulerPose, MotionSequence,
    PoseFrame,
};
pub use rotation::{
    euler_to_matrix, is_rotation, matrix_to_euler, matrix_to_rotation6d, rotation6d_to_matrix, EulerDecomposition,
    Rotation6D, SO3_TOLERANCE,
};
pub use skeleton::{BoneRef, Joint, SkeletonConfig, KEY_BONE_NAMES, NUM_KEY_BONES, SKELETON_FORMAT_VERSION};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("degenerate 6D rotation: a column norm underflowed")]
    DegenerateInput,
    #[error("matrix is not a rotation")]
    NotARotation,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
}
