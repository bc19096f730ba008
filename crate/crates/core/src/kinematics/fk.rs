use nalgebra::{Matrix3, Vector3};

use super::pose::{EulerPose, PoseFrame};
use super::skeleton::SkeletonConfig;
use super::KinematicsError;

/// Everything read off a posed skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub joint_positions: Vec<Vector3<f64>>,
    /// Accumulated global rotation of every joint.
    pub global_rotations: Vec<Matrix3<f64>>,
    /// Orientation of each bone, indexed by the bone's distal joint. Entry 0
    /// (the root, which ends no bone) holds the root rotation.
    pub bone_orientations: Vec<Matrix3<f64>>,
    pub marker_positions: Vec<Vector3<f64>>,
    /// Midpoints of the bones in `imu_map`.
    pub imu_positions: Vec<Vector3<f64>>,
    pub imu_orientations: Vec<Matrix3<f64>>,
}

impl FkResult {
    /// Midpoint of bone `bone`.
    pub fn bone_midpoint(&self, skeleton: &SkeletonConfig, bone: usize) -> Vector3<f64> {
        let p = skeleton.parent(bone).unwrap_or(bone);
        0.5 * (self.joint_positions[p] + self.joint_positions[bone])
    }

    /// Joint positions relative to the root.
    pub fn root_relative(&self) -> Vec<Vector3<f64>> {
        let root = self.joint_positions[0];
        self.joint_positions.iter().map(|p| p - root).collect()
    }
}

/// Forward kinematics from rotation matrices (`rotations[0]` global).
pub fn forward_kinematics_matrices(
    skeleton: &SkeletonConfig,
    rotations: &[Matrix3<f64>],
    t: &Vector3<f64>,
) -> Result<FkResult, KinematicsError> {
    let n = skeleton.num_joints();
    if rotations.len() != n {
        return Err(KinematicsError::DimensionMismatch {
            expected: n,
            found: rotations.len(),
        });
    }
    let mut global = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    global.push(rotations[0]);
    pos.push(*t);
    for j in 1..n {
        let joint = &skeleton.joints[j];
        let p = joint.parent.expect("validated skeleton");
        let g = global[p] * rotations[j];
        let x = pos[p] + global[p] * joint.offset();
        global.push(g);
        pos.push(x);
    }
    let bone_orientations: Vec<Matrix3<f64>> = (0..n)
        .map(|j| match skeleton.joints[j].parent {
            Some(p) => global[p],
            None => global[0],
        })
        .collect();
    let marker_positions = skeleton.marker_map.iter().map(|&m| pos[m]).collect();
    let imu_positions = skeleton
        .imu_map
        .iter()
        .map(|&b| {
            let p = skeleton.joints[b].parent.unwrap_or(b);
            0.5 * (pos[p] + pos[b])
        })
        .collect();
    let imu_orientations = skeleton.imu_map.iter().map(|&b| bone_orientations[b]).collect();
    Ok(FkResult {
        joint_positions: pos,
        global_rotations: global,
        bone_orientations,
        marker_positions,
        imu_positions,
        imu_orientations,
    })
}

/// Forward kinematics of a 6D pose.
pub fn forward_kinematics(skeleton: &SkeletonConfig, pose: &PoseFrame) -> Result<FkResult, KinematicsError> {
    if pose.theta_6d.len() != skeleton.num_joints() {
        return Err(KinematicsError::DimensionMismatch {
            expected: skeleton.num_joints(),
            found: pose.theta_6d.len(),
        });
    }
    forward_kinematics_matrices(skeleton, &pose.rotation_matrices()?, &pose.t)
}

pub fn forward_kinematics_euler(skeleton: &SkeletonConfig, pose: &EulerPose) -> Result<FkResult, KinematicsError> {
    forward_kinematics_matrices(skeleton, &pose.rotation_matrices(), &pose.t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::rotation::{random_rotation, rot_z};
    use crate::kinematics::skeleton::Joint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn chain(offsets: &[[f64; 3]]) -> SkeletonConfig {
        let mut joints = vec![Joint {
            name: "root".into(),
            parent: None,
            offset: [0.0; 3],
            limits_deg: None,
            end_site: None,
        }];
        for (i, o) in offsets.iter().enumerate() {
            joints.push(Joint {
                name: format!("j{}", i + 1),
                parent: Some(i),
                offset: *o,
                limits_deg: None,
                end_site: None,
            });
        }
        let n = joints.len();
        SkeletonConfig {
            format_version: 1,
            joints,
            key_bones: [crate::kinematics::BoneRef::Segment(1); 7],
            marker_map: (0..n).collect(),
            imu_map: vec![1],
            limb_endpoints: vec![],
            limb_bones: vec![],
            body_endpoints: vec![],
            body_bones: vec![],
        }
    }

    #[test]
    fn rest_pose_accumulates_offsets() {
        let s = SkeletonConfig::default_humanoid();
        let fk = forward_kinematics(&s, &PoseFrame::identity(19)).unwrap();
        for j in 1..19 {
            let p = s.parent(j).unwrap();
            let expected = fk.joint_positions[p] + s.joints[j].offset();
            assert_eq!(fk.joint_positions[j], expected);
        }
        assert!((fk.joint_positions[4] - Vector3::new(0.0, 0.0, 0.68)).norm() < 1e-15);
    }

    #[test]
    fn two_joint_chain_quarter_turn() {
        let l = 0.7;
        let s = chain(&[[l, 0.0, 0.0]]);
        let fk = forward_kinematics_matrices(&s, &[rot_z(FRAC_PI_2), Matrix3::identity()], &Vector3::zeros()).unwrap();
        assert!((fk.joint_positions[1] - Vector3::new(0.0, l, 0.0)).norm() < 1e-15);
        // the IMU sits halfway along the bone and takes the root's orientation
        assert!((fk.imu_positions[0] - Vector3::new(0.0, l / 2.0, 0.0)).norm() < 1e-15);
        assert_eq!(fk.imu_orientations[0], rot_z(FRAC_PI_2));
    }

    #[test]
    fn dimension_mismatch() {
        let s = SkeletonConfig::default_humanoid();
        assert!(matches!(
            forward_kinematics(&s, &PoseFrame::identity(5)),
            Err(KinematicsError::DimensionMismatch { expected: 19, found: 5 })
        ));
    }

    #[test]
    fn bones_stay_rigid() {
        let s = SkeletonConfig::default_humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let rots: Vec<_> = (0..19).map(|_| random_rotation(&mut rng)).collect();
            let fk = forward_kinematics_matrices(&s, &rots, &Vector3::new(1.0, -2.0, 3.0)).unwrap();
            for b in s.bones() {
                let p = s.parent(b).unwrap();
                let len = (fk.joint_positions[b] - fk.joint_positions[p]).norm();
                assert!((len - s.bone_length(b)).abs() < 1e-9);
            }
        }
    }
}
