//! Learned trackers: limb and body endpoint regressors, the IK solver and
//! the root tracker, their weakly supervised objectives and the trainer.

mod gru;
mod kernels;
mod losses;
mod stack;
pub mod tape;
mod train;
mod weights;

use thiserror::Error;

pub use gru::{gru_forward, GruBlock, GruHidden};
pub use losses::{
    camera_const, loss_body, loss_bone, loss_ik, loss_ik_2d, loss_ik_acc, loss_ik_ori, loss_joint, loss_limb, loss_prior,
    loss_trans, tape_fk, IkLoss, IkPrediction, JointTrack, LossWeights,
};
pub use stack::{
    infer_sequence, infer_sequence_detailed, ChunkOutput, Depth, SequencePrediction, StackConfig, StackHidden, StackState,
    StepVars, TrackerStack, POSITION_SCALE, STANDING_PELVIS_HEIGHT,
};
pub use tape::{ParamGrads, ParamId, ParamSet, Tape, Tensor, Var};
pub use train::{phase_loss, train_multiphase, Adam, Phase, PhaseCurve, Schedule, TrainReport, TrainingData};
pub use weights::{load_weights, save_weights, weights_from_bytes, weights_to_bytes, WeightsHeader, WEIGHTS_FORMAT_VERSION};

use crate::kinematics::KinematicsError;
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value encountered")]
    NumericalOverflow,
    #[error("sequence too short: {0} frames")]
    SequenceTooShort(usize),
    #[error("training diverged in phase {phase:?} at epoch {epoch}")]
    Divergence { phase: Phase, epoch: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid weights file: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
