//! Pose and acceleration metrics.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::calibration::{transform_acceleration, CalibrationResult};
use crate::kinematics::{forward_kinematics, MotionSequence, SkeletonConfig};
use crate::synth::{finite_diff_acceleration, FrameSample};

fn check_lengths(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch { pred: a, gt: b });
    }
    Ok(())
}

fn joints(skeleton: &SkeletonConfig, m: &MotionSequence) -> Result<Vec<Vec<Vector3<f64>>>, EvalError> {
    m.frames
        .iter()
        .map(|p| Ok(forward_kinematics(skeleton, p)?.joint_positions))
        .collect()
}

fn root_align(frame: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    frame.iter().map(|x| x - frame[0]).collect()
}

/// Mean joint position error in millimeters. With `aligned` the root
/// position of each frame is subtracted first.
pub fn mpjpe(pred: &MotionSequence, gt: &MotionSequence, skeleton: &SkeletonConfig, aligned: bool) -> Result<f64, EvalError> {
    check_lengths(pred.frames.len(), gt.frames.len())?;
    if pred.frames.is_empty() {
        return Ok(0.0);
    }
    let (a, b) = (joints(skeleton, pred)?, joints(skeleton, gt)?);
    let mut total = 0.0;
    let mut count = 0usize;
    for (fa, fb) in a.iter().zip(&b) {
        let (fa, fb) = if aligned { (root_align(fa), root_align(fb)) } else { (fa.clone(), fb.clone()) };
        for (x, y) in fa.iter().zip(&fb) {
            total += (x - y).norm();
            count += 1;
        }
    }
    Ok(1000.0 * total / count as f64)
}

/// Percentage of root-aligned non-root joints whose error is strictly
/// below `tau` times the frame's neck-to-pelvis distance.
pub fn pck(pred: &MotionSequence, gt: &MotionSequence, skeleton: &SkeletonConfig, tau: f64) -> Result<f64, EvalError> {
    check_lengths(pred.frames.len(), gt.frames.len())?;
    let neck = skeleton.joint_index("neck").ok_or_else(|| EvalError::UnknownJoint("neck".into()))?;
    let pelvis = skeleton.joint_index("pelvis").ok_or_else(|| EvalError::UnknownJoint("pelvis".into()))?;
    pck_positions(&joints(skeleton, pred)?, &joints(skeleton, gt)?, neck, pelvis, tau)
}

/// [`pck`] on joint positions (joint 0 is the root).
pub fn pck_positions(
    pred: &[Vec<Vector3<f64>>],
    gt: &[Vec<Vector3<f64>>],
    neck: usize,
    pelvis: usize,
    tau: f64,
) -> Result<f64, EvalError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(EvalError::InvalidThreshold(tau));
    }
    check_lengths(pred.len(), gt.len())?;
    let mut hit = 0usize;
    let mut count = 0usize;
    for (fa, fb) in pred.iter().zip(gt) {
        let torso = (fb[neck] - fb[pelvis]).norm();
        let (fa, fb) = (root_align(fa), root_align(fb));
        for (x, y) in fa.iter().zip(&fb).skip(1) {
            if (x - y).norm() < tau * torso {
                hit += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * hit as f64 / count as f64)
}

/// Mean distance between the stencil acceleration of the predicted sensor
/// positions and the measured accelerations of the input sensors, over
/// interior frames. Measurements are recomputed from the raw readings with
/// `calibration`.
pub fn accel_error(
    pred: &MotionSequence,
    frames: &[FrameSample],
    calibration: &CalibrationResult,
    skeleton: &SkeletonConfig,
) -> Result<f64, EvalError> {
    check_lengths(pred.frames.len(), frames.len())?;
    let n = frames.len();
    if n < 3 {
        return Err(EvalError::SequenceTooShort(n));
    }
    if skeleton.imu_map.is_empty() {
        return Ok(0.0);
    }
    let st = pred.sampling_time();
    let fks = pred
        .frames
        .iter()
        .map(|p| forward_kinematics(skeleton, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for t in 1..n - 1 {
        let imus = frames[t].input_imus(skeleton)?;
        for (i, &b) in skeleton.imu_map.iter().enumerate() {
            let p = |k: usize| fks[k].bone_midpoint(skeleton, b);
            let a = finite_diff_acceleration(&p(t - 1), &p(t), &p(t + 1), st);
            let m = transform_acceleration(&imus[i].raw, calibration)?;
            total += (a - m).norm();
        }
    }
    Ok(total / ((n - 2) * skeleton.imu_map.len()) as f64)
}

/// Mean stencil acceleration magnitude over interior frames and all joints.
pub fn accel_mean(pred: &MotionSequence, skeleton: &SkeletonConfig) -> Result<f64, EvalError> {
    let n = pred.frames.len();
    if n < 3 {
        return Err(EvalError::SequenceTooShort(n));
    }
    let st = pred.sampling_time();
    let j = joints(skeleton, pred)?;
    let mut total = 0.0;
    for t in 1..n - 1 {
        for k in 0..skeleton.num_joints() {
            total += finite_diff_acceleration(&j[t - 1][k], &j[t][k], &j[t + 1][k], st).norm();
        }
    }
    Ok(total / ((n - 2) * skeleton.num_joints()) as f64)
}

/// Key under which a PCK threshold is stored.
pub fn pck_key(tau: f64) -> String {
    format!("{tau:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Millimeters.
    pub mpjpe_global: f64,
    /// Millimeters.
    pub mpjpe_root_aligned: f64,
    /// Percent, keyed by threshold.
    pub pck: BTreeMap<String, f64>,
    /// m/s^2.
    pub accel_error: f64,
    /// m/s^2.
    pub accel_mean: f64,
}

impl MetricRow {
    pub fn evaluate(
        pred: &MotionSequence,
        gt: &MotionSequence,
        frames: &[FrameSample],
        calibration: &CalibrationResult,
        skeleton: &SkeletonConfig,
        thresholds: &[f64],
    ) -> Result<Self, EvalError> {
        let mut p = BTreeMap::new();
        for &tau in thresholds {
            p.insert(pck_key(tau), pck(pred, gt, skeleton, tau)?);
        }
        Ok(MetricRow {
            mpjpe_global: mpjpe(pred, gt, skeleton, false)?,
            mpjpe_root_aligned: mpjpe(pred, gt, skeleton, true)?,
            pck: p,
            accel_error: accel_error(pred, frames, calibration, skeleton)?,
            accel_mean: accel_mean(pred, skeleton)?,
        })
    }

    /// Frame-weighted mean of several rows.
    pub fn weighted_mean(rows: &[(usize, &MetricRow)]) -> Option<MetricRow> {
        let total: usize = rows.iter().map(|(n, _)| n).sum();
        if total == 0 {
            return None;
        }
        let w = |n: usize| n as f64 / total as f64;
        let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(|(n, r)| w(*n) * f(r)).sum::<f64>();
        let mut p = BTreeMap::new();
        for key in rows[0].1.pck.keys() {
            p.insert(key.clone(), mean(&|r| r.pck[key]));
        }
        Some(MetricRow {
            mpjpe_global: mean(&|r| r.mpjpe_global),
            mpjpe_root_aligned: mean(&|r| r.mpjpe_root_aligned),
            pck: p,
            accel_error: mean(&|r| r.accel_error),
            accel_mean: mean(&|r| r.accel_mean),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub metrics: MetricRow,
}

/// Metrics of one pipeline output (network, refined, or an ablation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub sequences: Vec<SequenceMetrics>,
    pub aggregate: MetricRow,
}

impl StageMetrics {
    pub fn from_sequences(stage: &str, sequences: Vec<SequenceMetrics>) -> Result<Self, EvalError> {
        let rows: Vec<(usize, &MetricRow)> = sequences.iter().map(|s| (s.frames, &s.metrics)).collect();
        let aggregate = MetricRow::weighted_mean(&rows).ok_or_else(|| EvalError::InvalidConfig("no evaluation frames".into()))?;
        Ok(StageMetrics {
            stage: stage.to_string(),
            sequences,
            aggregate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub stages: Vec<StageMetrics>,
}

impl MetricsReport {
    pub fn stage(&self, name: &str) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == name)
    }
}
