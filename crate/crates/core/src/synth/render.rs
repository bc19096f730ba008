use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::camera::{canonicalize, project_unchecked, CameraModel};
use super::SynthError;
use crate::calibration::{CalibrationError, CalibrationResult, ImuMeasurement};
use crate::kinematics::rotation::{axis_angle, random_unit_vector, to_row_major};
use crate::kinematics::{forward_kinematics, MotionSequence, PoseFrame, SkeletonConfig, NUM_KEY_BONES};

/// Observation noise. Pixel quantities are in pixels, angles in degrees,
/// accelerations in m/s^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of the per-axis keypoint noise.
    pub keypoint_px: f64,
    /// Noise magnitude at which a keypoint's confidence reaches zero.
    pub confidence_scale_px: f64,
    /// Probability that a keypoint is dropped (confidence 0).
    pub dropout: f64,
    /// Standard deviation of the IMU orientation noise angle.
    pub imu_orientation_deg: f64,
    /// Per-axis standard deviation of the IMU acceleration noise.
    pub acceleration: f64,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            keypoint_px: 0.0,
            confidence_scale_px: 1.0,
            dropout: 0.0,
            imu_orientation_deg: 0.0,
            acceleration: 0.0,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            keypoint_px: 2.0,
            confidence_scale_px: 12.0,
            dropout: 0.02,
            imu_orientation_deg: 1.0,
            acceleration: 0.2,
        }
    }
}

/// 2D detections of one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservation {
    pub camera: usize,
    /// Pixel positions. Dropped keypoints sit at the principal point.
    pub p: Vec<Vector2<f64>>,
    pub sigma: Vec<f64>,
    /// `p` on the camera's Z=1 plane.
    pub p_c: Vec<Vector2<f64>>,
}

/// One IMU reading in raw and calibrated form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub raw: ImuMeasurement,
    /// Bone orientation in the capture frame.
    pub orientation: Matrix3<f64>,
    /// Acceleration in the capture frame.
    pub acceleration: Vector3<f64>,
}

impl ImuSample {
    pub fn sensor(&self) -> usize {
        self.raw.sensor
    }

    /// Recomputes the calibrated quantities from the raw reading.
    pub fn recalibrate(&mut self, calib: &CalibrationResult) -> Result<(), CalibrationError> {
        self.orientation = crate::calibration::transform_orientation(&self.raw, calib)?;
        self.acceleration = crate::calibration::transform_acceleration(&self.raw, calib)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    pub index: usize,
    /// Sampling time in seconds.
    pub sampling_time: f64,
    /// Ground-truth pose in the capture frame.
    pub pose: PoseFrame,
    pub keypoints: Vec<KeypointObservation>,
    /// Every simulated sensor, sorted by host bone. The skeleton's `imu_map`
    /// picks the network inputs; the rest only serve as supervision.
    pub imus: Vec<ImuSample>,
}

impl FrameSample {
    pub fn imu(&self, bone: usize) -> Option<&ImuSample> {
        self.imus.iter().find(|s| s.sensor() == bone)
    }

    /// Input sensors in `imu_map` order.
    pub fn input_imus(&self, skeleton: &SkeletonConfig) -> Result<Vec<&ImuSample>, SynthError> {
        skeleton
            .imu_map
            .iter()
            .map(|&b| self.imu(b).ok_or(SynthError::MissingSensor(b)))
            .collect()
    }
}

/// Second-difference acceleration.
pub fn finite_diff_acceleration(prev: &Vector3<f64>, cur: &Vector3<f64>, next: &Vector3<f64>, st: f64) -> Vector3<f64> {
    (next - 2.0 * cur + prev) / (st * st)
}

/// Stencil applied along a trajectory; the first and last frames copy their
/// neighbour's value.
pub fn sensor_accelerations(positions: &[Vector3<f64>], st: f64) -> Vec<Vector3<f64>> {
    let n = positions.len();
    let mut out = vec![Vector3::zeros(); n];
    if n < 3 {
        return out;
    }
    for t in 1..n - 1 {
        out[t] = finite_diff_acceleration(&positions[t - 1], &positions[t], &positions[t + 1], st);
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulates cameras and IMUs watching `seq` (capture frame).
///
/// `sensors` lists the host bones of every simulated IMU; each needs a
/// mounting in `calibration`. Keypoint noise is isotropic Gaussian; the
/// confidence is `clamp(1 - |noise| / confidence_scale_px, 0, 1)` and a
/// dropped keypoint gets confidence 0. Orientation noise is a rotation about
/// a random axis applied in the bone frame; accelerations come from the
/// second-difference stencil on the true sensor positions plus Gaussian noise.
pub fn render_observations(
    seq: &MotionSequence,
    skeleton: &SkeletonConfig,
    cameras: &[CameraModel],
    calibration: &CalibrationResult,
    sensors: &[usize],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<FrameSample>, SynthError> {
    if cameras.is_empty() {
        return Err(SynthError::NoCameras);
    }
    if seq.len() < 3 {
        return Err(SynthError::TooFewFrames(seq.len()));
    }
    for c in cameras {
        c.validate()?;
    }
    let mut sensors = sensors.to_vec();
    sensors.sort_unstable();
    sensors.dedup();
    for &s in &sensors {
        if s == 0 || s >= skeleton.num_joints() {
            return Err(SynthError::MissingSensor(s));
        }
        if !calibration.r_s2b.contains_key(&s) {
            return Err(CalibrationError::UnknownSensor(s).into());
        }
    }
    let st = seq.sampling_time();
    let fks = seq
        .frames
        .iter()
        .map(|f| forward_kinematics(skeleton, f))
        .collect::<Result<Vec<_>, _>>()?;
    let accels: Vec<Vec<Vector3<f64>>> = sensors
        .iter()
        .map(|&b| {
            let pos: Vec<_> = fks.iter().map(|fk| fk.bone_midpoint(skeleton, b)).collect();
            sensor_accelerations(&pos, st)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(seq.len());
    for (t, (frame, fk)) in seq.frames.iter().zip(&fks).enumerate() {
        let mut keypoints = Vec::with_capacity(cameras.len());
        for (ci, cam) in cameras.iter().enumerate() {
            let m = fk.marker_positions.len();
            let mut p = Vec::with_capacity(m);
            let mut sigma = Vec::with_capacity(m);
            for x in &fk.marker_positions {
                let n = Vector2::new(gaussian(&mut rng), gaussian(&mut rng)) * noise.keypoint_px;
                let dropped = rng.random::<f64>() < noise.dropout;
                let xc = cam.to_camera(x);
                if dropped || !(xc.z > super::camera::MIN_DEPTH) {
                    p.push(Vector2::new(cam.cx, cam.cy));
                    sigma.push(0.0);
                    continue;
                }
                let q = project_unchecked(cam, &xc);
                if noise.keypoint_px == 0.0 {
                    p.push(q);
                    sigma.push(1.0);
                } else {
                    p.push(q + n);
                    sigma.push((1.0 - n.norm() / noise.confidence_scale_px).clamp(0.0, 1.0));
                }
            }
            let p_c = p.iter().map(|q| canonicalize(q, cam)).collect();
            keypoints.push(KeypointObservation { camera: ci, p, sigma, p_c });
        }
        let mut imus = Vec::with_capacity(sensors.len());
        for (k, &b) in sensors.iter().enumerate() {
            let axis = random_unit_vector(&mut rng);
            let angle = gaussian(&mut rng) * noise.imu_orientation_deg.to_radians();
            let an = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * noise.acceleration;
            let mut r_b = fk.bone_orientations[b];
            if angle != 0.0 {
                r_b *= axis_angle(&axis, angle);
            }
            let mut acc = accels[k][t];
            if noise.acceleration != 0.0 {
                acc += an;
            }
            let raw = ImuMeasurement {
                sensor: b,
                orientation: crate::calibration::raw_orientation_for_bone(&r_b, b, calibration)?,
                acceleration: crate::calibration::raw_acceleration(&acc, calibration),
            };
            imus.push(ImuSample {
                raw,
                orientation: r_b,
                acceleration: acc,
            });
        }
        out.push(FrameSample {
            index: t,
            sampling_time: st,
            pose: frame.clone(),
            keypoints,
            imus,
        });
    }
    Ok(out)
}

/// Length of the per-frame network input for `skeleton`.
pub fn input_dim(skeleton: &SkeletonConfig) -> usize {
    3 * skeleton.num_markers() + 12 * skeleton.num_imus() + NUM_KEY_BONES
}

/// Per-frame network input `[p_c, sigma, R_b (row-major), A, L_k]` using the
/// keypoints of `camera`.
pub fn assemble_input(frame: &FrameSample, skeleton: &SkeletonConfig, camera: usize) -> Result<Vec<f64>, SynthError> {
    let kp = frame
        .keypoints
        .iter()
        .find(|k| k.camera == camera)
        .ok_or(SynthError::DimensionMismatch {
            expected: camera + 1,
            found: frame.keypoints.len(),
        })?;
    let m = skeleton.num_markers();
    if kp.p_c.len() != m || kp.sigma.len() != m {
        return Err(SynthError::DimensionMismatch {
            expected: m,
            found: kp.p_c.len(),
        });
    }
    let imus = frame.input_imus(skeleton)?;
    let mut x = Vec::with_capacity(input_dim(skeleton));
    for q in &kp.p_c {
        x.push(q.x);
        x.push(q.y);
    }
    x.extend_from_slice(&kp.sigma);
    for s in &imus {
        x.extend_from_slice(&to_row_major(&s.orientation));
    }
    for s in &imus {
        x.extend_from_slice(s.acceleration.as_slice());
    }
    x.extend_from_slice(&skeleton.key_bone_lengths());
    Ok(x)
}
