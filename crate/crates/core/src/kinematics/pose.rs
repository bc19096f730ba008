use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::rotation::{
    euler_to_matrix, matrix_to_euler, matrix_to_rotation6d, rotation6d_to_matrix, Rotation6D,
};
use super::KinematicsError;

/// One frame of motion: entry 0 of `theta_6d` is the global root rotation,
/// the others are local joint rotations. `t` is the root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub theta_6d: Vec<Rotation6D>,
    pub t: Vector3<f64>,
}

impl PoseFrame {
    pub fn identity(num_joints: usize) -> Self {
        PoseFrame {
            theta_6d: vec![Rotation6D::IDENTITY; num_joints],
            t: Vector3::zeros(),
        }
    }

    pub fn from_matrices(rotations: &[Matrix3<f64>], t: Vector3<f64>) -> Result<Self, KinematicsError> {
        let theta_6d = rotations
            .iter()
            .map(matrix_to_rotation6d)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PoseFrame { theta_6d, t })
    }

    pub fn rotation_matrices(&self) -> Result<Vec<Matrix3<f64>>, KinematicsError> {
        self.theta_6d.iter().map(rotation6d_to_matrix).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().all(|v| v.is_finite()) && self.theta_6d.iter().all(Rotation6D::is_finite)
    }
}

/// Euler view of a pose: `angles[0]` is the global rotation, the rest are
/// local joint angles, all intrinsic XYZ in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerPose {
    pub angles: Vec<Vector3<f64>>,
    pub t: Vector3<f64>,
}

impl EulerPose {
    pub fn rotation_matrices(&self) -> Vec<Matrix3<f64>> {
        self.angles.iter().map(euler_to_matrix).collect()
    }

    pub const PARAMS_PER_JOINT: usize = 3;

    /// Number of scalar parameters: three per joint plus the translation.
    pub fn num_params(&self) -> usize {
        3 * self.angles.len() + 3
    }

    /// Flat parameter vector `[angles..., t]`.
    pub fn to_params(&self, out: &mut [f64]) {
        for (j, a) in self.angles.iter().enumerate() {
            out[3 * j..3 * j + 3].copy_from_slice(a.as_slice());
        }
        let n = self.angles.len();
        out[3 * n..3 * n + 3].copy_from_slice(self.t.as_slice());
    }

    pub fn from_params(params: &[f64], num_joints: usize) -> Self {
        let angles = (0..num_joints)
            .map(|j| Vector3::new(params[3 * j], params[3 * j + 1], params[3 * j + 2]))
            .collect();
        let n = 3 * num_joints;
        EulerPose {
            angles,
            t: Vector3::new(params[n], params[n + 1], params[n + 2]),
        }
    }
}

/// A sampled motion at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub fps: f64,
    pub frames: Vec<PoseFrame>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sampling time in seconds.
    pub fn sampling_time(&self) -> f64 {
        1.0 / self.fps
    }
}

/// Euler-parameterized motion, the form refined by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerMotion {
    pub fps: f64,
    pub frames: Vec<EulerPose>,
}

/// Converts a 6D pose to its Euler form. The flag reports whether any joint
/// hit the gimbal-lock tie-break; the rotation matrices are preserved either way.
pub fn pose_to_euler(pose: &PoseFrame) -> Result<(EulerPose, bool), KinematicsError> {
    let mut lock = false;
    let mut angles = Vec::with_capacity(pose.theta_6d.len());
    for r in &pose.theta_6d {
        let d = matrix_to_euler(&rotation6d_to_matrix(r)?)?;
        lock |= d.gimbal_lock;
        angles.push(d.angles);
    }
    Ok((EulerPose { angles, t: pose.t }, lock))
}

pub fn euler_to_pose(pose: &EulerPose) -> PoseFrame {
    let theta_6d = pose
        .angles
        .iter()
        .map(|a| {
            let m = euler_to_matrix(a);
            Rotation6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
        })
        .collect();
    PoseFrame { theta_6d, t: pose.t }
}

/// Whole-sequence version of [`pose_to_euler`].
pub fn motion_to_euler(seq: &MotionSequence) -> Result<(EulerMotion, bool), KinematicsError> {
    let mut lock = false;
    let mut frames = Vec::with_capacity(seq.len());
    for f in &seq.frames {
        let (e, l) = pose_to_euler(f)?;
        lock |= l;
        frames.push(e);
    }
    Ok((EulerMotion { fps: seq.fps, frames }, lock))
}

pub fn euler_to_motion(seq: &EulerMotion) -> MotionSequence {
    MotionSequence {
        fps: seq.fps,
        frames: seq.frames.iter().map(euler_to_pose).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::rotation::{euler_to_matrix, random_rotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn max_matrix_error(a: &PoseFrame, b: &PoseFrame) -> f64 {
        let ma = a.rotation_matrices().unwrap();
        let mb = b.rotation_matrices().unwrap();
        ma.iter().zip(&mb).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_pose_round_trip() {
        let p = PoseFrame::identity(19);
        let (e, lock) = pose_to_euler(&p).unwrap();
        assert!(!lock);
        assert!(e.angles.iter().all(|a| a.norm() == 0.0));
        assert_eq!(euler_to_pose(&e), p);
    }

    #[test]
    fn random_pose_round_trip_preserves_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mats: Vec<_> = (0..19).map(|_| random_rotation(&mut rng)).collect();
            let p = PoseFrame::from_matrices(&mats, Vector3::new(0.1, 0.2, 3.0)).unwrap();
            let (e, _) = pose_to_euler(&p).unwrap();
            let back = euler_to_pose(&e);
            assert!(max_matrix_error(&p, &back) < 1e-9);
            assert_eq!(back.t, p.t);
        }
    }

    #[test]
    fn gimbal_lock_pose_round_trip_preserves_matrices() {
        let mats = vec![euler_to_matrix(&Vector3::new(0.4, FRAC_PI_2, 1.1)); 3];
        let p = PoseFrame::from_matrices(&mats, Vector3::zeros()).unwrap();
        let (e, lock) = pose_to_euler(&p).unwrap();
        assert!(lock);
        assert_ne!(e.angles[0], Vector3::new(0.4, FRAC_PI_2, 1.1));
        assert!(max_matrix_error(&p, &euler_to_pose(&e)) < 1e-9);
    }

    #[test]
    fn param_vector_layout() {
        let e = EulerPose {
            angles: vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)],
            t: Vector3::new(7.0, 8.0, 9.0),
        };
        let mut p = vec![0.0; e.num_params()];
        e.to_params(&mut p);
        assert_eq!(p, (1..=9).map(f64::from).collect::<Vec<_>>());
        assert_eq!(EulerPose::from_params(&p, 2), e);
    }
}
