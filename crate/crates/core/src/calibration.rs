//! IMU to camera calibration from an A-pose / T-pose frame pair, and the
//! per-frame mapping of inertial measurements into the camera frame.
//!
//! Each sensor `n` ties its inertial-frame orientation `R~_n` to the
//! orientation `B_n` of its host bone through
//!
//! ```text
//! R_I2C * R~_n = B_n * R_S2B,n
//! ```
//!
//! for both calibration frames. With noisy observations the two equations
//! disagree, so the unknowns are fitted in the least-squares sense by
//! alternating Procrustes updates on SO(3).

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::rotation::{is_rotation, log_map, nearest_rotation, SO3_TOLERANCE};

/// Minimum relative rotation between the two calibration frames, and minimum
/// separation of the rotation axes, for the system to be well posed.
pub const MIN_CALIBRATION_MOTION_DEG: f64 = 5.0;

pub const MAX_SWEEPS: usize = 1000;
pub const OBJECTIVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("calibration system is rank deficient: {0}")]
    RankDeficient(String),
    #[error("alternating calibration did not converge after {sweeps} sweeps (last decrease {last_decrease:e})")]
    NonConvergence { sweeps: usize, last_decrease: f64 },
    #[error("unknown sensor {0}")]
    UnknownSensor(usize),
    #[error("input matrix for sensor {0} is not a rotation")]
    NotARotation(usize),
}

/// Raw inertial reading: orientation in the inertial frame and
/// gravity-removed acceleration (m/s^2), also in the inertial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuMeasurement {
    pub sensor: usize,
    pub orientation: Matrix3<f64>,
    pub acceleration: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Inertial frame to camera frame.
    pub r_i2c: Matrix3<f64>,
    /// Sensor frame to bone frame, keyed by sensor id.
    pub r_s2b: BTreeMap<usize, Matrix3<f64>>,
}

impl CalibrationResult {
    pub fn identity(sensors: impl IntoIterator<Item = usize>) -> Self {
        CalibrationResult {
            r_i2c: Matrix3::identity(),
            r_s2b: sensors.into_iter().map(|s| (s, Matrix3::identity())).collect(),
        }
    }

    fn mounting(&self, sensor: usize) -> Result<&Matrix3<f64>, CalibrationError> {
        self.r_s2b.get(&sensor).ok_or(CalibrationError::UnknownSensor(sensor))
    }
}

/// Orientations of one sensor and its bone in both calibration frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorPosePair {
    pub sensor: usize,
    pub imu_a: Matrix3<f64>,
    pub imu_t: Matrix3<f64>,
    pub bone_a: Matrix3<f64>,
    pub bone_t: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationObservation {
    pub sensors: Vec<SensorPosePair>,
}

#[derive(Debug, Clone, Default)]
pub struct CalibrationOptions {
    /// Starting point for `R_I2C`. When absent it is estimated in closed form
    /// by aligning the relative-rotation axes of the two frames.
    pub initial_r_i2c: Option<Matrix3<f64>>,
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub result: CalibrationResult,
    /// Sum of squared Frobenius residuals at the solution.
    pub objective: f64,
    pub sweeps: usize,
}

/// Sum over sensors and both frames of `||R_I2C R~ - B R_S2B||_F^2`.
pub fn calibration_objective(obs: &CalibrationObservation, calib: &CalibrationResult) -> Result<f64, CalibrationError> {
    let mut total = 0.0;
    for s in &obs.sensors {
        let y = calib.mounting(s.sensor)?;
        total += (calib.r_i2c * s.imu_a - s.bone_a * y).norm_squared();
        total += (calib.r_i2c * s.imu_t - s.bone_t * y).norm_squared();
    }
    Ok(total)
}

pub fn calibrate_two_frame(obs: &CalibrationObservation) -> Result<CalibrationResult, CalibrationError> {
    calibrate_two_frame_with(obs, &CalibrationOptions::default()).map(|r| r.result)
}

pub fn calibrate_two_frame_with(
    obs: &CalibrationObservation,
    options: &CalibrationOptions,
) -> Result<CalibrationReport, CalibrationError> {
    for s in &obs.sensors {
        for m in [&s.imu_a, &s.imu_t, &s.bone_a, &s.bone_t] {
            if !is_rotation(m, SO3_TOLERANCE) {
                return Err(CalibrationError::NotARotation(s.sensor));
            }
        }
    }
    check_rank(obs)?;

    let mut x = match options.initial_r_i2c {
        Some(m) => nearest_rotation(&m),
        None => axis_alignment(obs),
    };
    let mut calib = CalibrationResult {
        r_i2c: x,
        r_s2b: BTreeMap::new(),
    };
    update_mountings(obs, &mut calib);
    let mut objective = calibration_objective(obs, &calib)?;
    let mut last_decrease = f64::INFINITY;
    for sweep in 1..=MAX_SWEEPS {
        let mut m = Matrix3::zeros();
        for s in &obs.sensors {
            let y = calib.r_s2b[&s.sensor];
            m += s.bone_a * y * s.imu_a.transpose() + s.bone_t * y * s.imu_t.transpose();
        }
        x = nearest_rotation(&m);
        calib.r_i2c = x;
        update_mountings(obs, &mut calib);
        let next = calibration_objective(obs, &calib)?;
        if !next.is_finite() {
            return Err(CalibrationError::NonConvergence { sweeps: sweep, last_decrease });
        }
        last_decrease = objective - next;
        objective = next;
        if last_decrease < OBJECTIVE_TOLERANCE {
            return Ok(CalibrationReport {
                result: calib,
                objective,
                sweeps: sweep,
            });
        }
    }
    Err(CalibrationError::NonConvergence {
        sweeps: MAX_SWEEPS,
        last_decrease,
    })
}

/// Optimal mountings for the current `R_I2C`.
fn update_mountings(obs: &CalibrationObservation, calib: &mut CalibrationResult) {
    let x = calib.r_i2c;
    for s in &obs.sensors {
        let m = s.bone_a.transpose() * x * s.imu_a + s.bone_t.transpose() * x * s.imu_t;
        calib.r_s2b.insert(s.sensor, nearest_rotation(&m));
    }
}

/// Relative rotations of each sensor between the frames, in the inertial
/// frame and in the camera frame. They satisfy `D = R_I2C C R_I2C^T`.
fn relative_rotation_vectors(obs: &CalibrationObservation) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    obs.sensors
        .iter()
        .map(|s| {
            let c = s.imu_t * s.imu_a.transpose();
            let d = s.bone_t * s.bone_a.transpose();
            (log_map(&c), log_map(&d))
        })
        .collect()
}

/// `R_I2C` maps every inertial relative-rotation axis onto the matching
/// camera-frame axis; solve that alignment as a weighted Procrustes problem.
fn axis_alignment(obs: &CalibrationObservation) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (c, d) in relative_rotation_vectors(obs) {
        m += d * c.transpose();
    }
    nearest_rotation(&m)
}

fn check_rank(obs: &CalibrationObservation) -> Result<(), CalibrationError> {
    if obs.sensors.len() < 2 {
        return Err(CalibrationError::RankDeficient(format!(
            "need at least 2 sensors, got {}",
            obs.sensors.len()
        )));
    }
    let min_angle = MIN_CALIBRATION_MOTION_DEG.to_radians();
    let axes: Vec<Vector3<f64>> = relative_rotation_vectors(obs)
        .into_iter()
        .filter(|(_, d)| d.norm() >= min_angle)
        .map(|(_, d)| d.normalize())
        .collect();
    if axes.is_empty() {
        return Err(CalibrationError::RankDeficient(
            "no sensor moved between the A-pose and T-pose frames".into(),
        ));
    }
    // a single rotation axis leaves R_I2C free to spin about it
    let spread = axes
        .iter()
        .flat_map(|a| axes.iter().map(move |b| a.cross(b).norm()))
        .fold(0.0, f64::max);
    if spread < min_angle.sin() {
        return Err(CalibrationError::RankDeficient(
            "all sensors rotated about the same axis".into(),
        ));
    }
    Ok(())
}

/// Bone orientation in the camera frame: `R_I2C * R~_n * R_S2B,n^T`.
pub fn transform_orientation(meas: &ImuMeasurement, calib: &CalibrationResult) -> Result<Matrix3<f64>, CalibrationError> {
    let y = calib.mounting(meas.sensor)?;
    Ok(calib.r_i2c * meas.orientation * y.transpose())
}

/// Acceleration in the camera frame: `R_I2C * A_I,n`.
pub fn transform_acceleration(meas: &ImuMeasurement, calib: &CalibrationResult) -> Result<Vector3<f64>, CalibrationError> {
    calib.mounting(meas.sensor)?;
    Ok(calib.r_i2c * meas.acceleration)
}

/// Raw inertial-frame orientation that a sensor mounted with `calib` reports
/// for a bone oriented as `bone` in the camera frame.
pub fn raw_orientation_for_bone(bone: &Matrix3<f64>, sensor: usize, calib: &CalibrationResult) -> Result<Matrix3<f64>, CalibrationError> {
    let y = calib.mounting(sensor)?;
    Ok(calib.r_i2c.transpose() * bone * y)
}

pub fn raw_acceleration(acc_camera: &Vector3<f64>, calib: &CalibrationResult) -> Vector3<f64> {
    calib.r_i2c.transpose() * acc_camera
}
