use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::camera::Rig;
use super::SynthError;
use crate::calibration::{raw_orientation_for_bone, CalibrationObservation, CalibrationResult, SensorPosePair};
use crate::kinematics::rotation::{axis_angle, random_rotation, random_unit_vector, rot_y};
use crate::kinematics::{forward_kinematics, PoseFrame, SkeletonConfig};

/// A-pose and T-pose of the humanoid in the stage frame.
///
/// In the A-pose the upper arms hang 30 degrees below the rest pose, the
/// elbows are flexed 90 degrees forward and the forearms are twisted a
/// quarter turn. The T-pose raises the upper arms to horizontal with straight
/// elbows. The moving sensors thus turn about well separated axes.
pub fn calibration_poses(skeleton: &SkeletonConfig) -> Result<(PoseFrame, PoseFrame), SynthError> {
    let idx = |name: &str| skeleton.joint_index(name).ok_or_else(|| SynthError::UnknownJoint(name.to_string()));
    let n = skeleton.num_joints();
    let mut a = vec![nalgebra::Matrix3::identity(); n];
    let mut t = a.clone();
    let (lower, flex, twist) = (30f64.to_radians(), 90f64.to_radians(), -90f64.to_radians());
    a[idx("l_uparm")?] = rot_y(-lower);
    a[idx("r_uparm")?] = rot_y(lower);
    a[idx("l_lowarm")?] = axis_angle(&Vector3::new(1.0, 0.0, -1.0), flex) * axis_angle(&Vector3::new(-1.0, 0.0, -1.0), twist);
    a[idx("r_lowarm")?] = axis_angle(&Vector3::new(1.0, 0.0, 1.0), flex) * axis_angle(&Vector3::new(1.0, 0.0, -1.0), twist);
    t[idx("l_uparm")?] = rot_y(45f64.to_radians());
    t[idx("r_uparm")?] = rot_y(-45f64.to_radians());
    let root = Vector3::new(0.0, 0.0, 0.96);
    Ok((PoseFrame::from_matrices(&a, root)?, PoseFrame::from_matrices(&t, root)?))
}

/// Random ground-truth calibration: uniform `R_I2C` and mountings.
pub fn random_calibration(sensors: &[usize], seed: u64) -> CalibrationResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = CalibrationResult::identity(sensors.iter().copied());
    c.r_i2c = random_rotation(&mut rng);
    for v in c.r_s2b.values_mut() {
        *v = random_rotation(&mut rng);
    }
    c
}

/// Simulates the A/T calibration capture: bone orientations as the visual
/// system would estimate them and the matching raw IMU readings, each
/// perturbed by a rotation of `noise_deg` standard deviation.
pub fn simulate_calibration(
    skeleton: &SkeletonConfig,
    rig: &Rig,
    truth: &CalibrationResult,
    sensors: &[usize],
    noise_deg: f64,
    seed: u64,
) -> Result<CalibrationObservation, SynthError> {
    let (a, t) = calibration_poses(skeleton)?;
    let fa = forward_kinematics(skeleton, &rig.stage_pose(&a)?)?;
    let ft = forward_kinematics(skeleton, &rig.stage_pose(&t)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise_deg.to_radians();
    let jitter = |rng: &mut ChaCha8Rng| {
        let axis = random_unit_vector(rng);
        let g: f64 = rng.sample(StandardNormal);
        axis_angle(&axis, g * sigma)
    };
    let mut out = Vec::with_capacity(sensors.len());
    for &s in sensors {
        let bone_a = fa.bone_orientations[s];
        let bone_t = ft.bone_orientations[s];
        let imu_a = raw_orientation_for_bone(&bone_a, s, truth)? * jitter(&mut rng);
        let imu_t = raw_orientation_for_bone(&bone_t, s, truth)? * jitter(&mut rng);
        out.push(SensorPosePair {
            sensor: s,
            imu_a,
            imu_t,
            bone_a: bone_a * jitter(&mut rng),
            bone_t: bone_t * jitter(&mut rng),
        });
    }
    Ok(CalibrationObservation { sensors: out })
}
