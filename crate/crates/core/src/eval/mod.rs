//! Metrics, pipeline configuration and orchestration, and motion export.

mod config;
mod export;
mod metrics;
mod pipeline;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    CalibrationConfig, DataConfig, EvalConfig, InitKind, ModelConfig, OptimizerConfig, PathsConfig, PipelineConfig, RigConfig,
};
pub use export::{export_motion_text, parse_motion_text};
pub use metrics::{accel_error, accel_mean, mpjpe, pck, pck_key, pck_positions, MetricRow, MetricsReport, SequenceMetrics, StageMetrics};
pub use pipeline::{
    apply_calibration, calibrate_stage, evaluate_stage, infer_stage, optimize_sequence, run_pipeline, simulate_stage, train_stage,
    InferenceRun, PipelineOutput, Seeds, Simulation, Throughput,
};

use crate::calibration::CalibrationError;
use crate::inference::InferenceError;
use crate::kinematics::KinematicsError;
use crate::optimizer::OptimizerError;
use crate::synth::SynthError;

/// Pipeline stage, used to attribute failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Simulate,
    Calibrate,
    Train,
    Infer,
    Optimize,
    Eval,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Simulate => "simulate",
            Stage::Calibrate => "calibrate",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Optimize => "optimize",
            Stage::Eval => "eval",
            Stage::Export => "export",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: prediction has {pred} frames, reference has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("sequence too short: {0} frames")]
    SequenceTooShort(usize),
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("skeleton lacks joint {0:?}")]
    UnknownJoint(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed motion text at line {line}: {msg}")]
    MotionText { line: usize, msg: String },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl EvalError {
    /// Wraps an error with the stage it came from, keeping the innermost
    /// attribution.
    pub fn at(stage: Stage) -> impl FnOnce(EvalError) -> EvalError {
        move |e| match e {
            e @ EvalError::Stage { .. } => e,
            e => EvalError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            EvalError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}
