use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::KinematicsError;

pub const SKELETON_FORMAT_VERSION: u32 = 1;

/// Number of anthropometric key bone lengths fed to the trackers.
pub const NUM_KEY_BONES: usize = 7;

/// Names of the key bones, in input order.
pub const KEY_BONE_NAMES: [&str; NUM_KEY_BONES] =
    ["uparm", "lowarm", "upleg", "lowleg", "foot", "clavicle", "spine"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the parent's frame at rest, meters.
    pub offset: [f64; 3],
    /// Per-axis Euler limits in degrees, `[min, max]`. `None` means
    /// unconstrained (the root).
    #[serde(default)]
    pub limits_deg: Option<[[f64; 3]; 2]>,
    /// Tip of a leaf joint's own bone, in the joint's frame.
    #[serde(default)]
    pub end_site: Option<[f64; 3]>,
}

/// Reference to a bone for the key-length vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoneRef {
    /// Segment ending at this joint.
    Segment(usize),
    /// Segment from this leaf joint to its end site.
    EndSite(usize),
}

impl Joint {
    pub fn offset(&self) -> Vector3<f64> {
        Vector3::from(self.offset)
    }
}

/// Kinematic tree plus the marker, sensor and tracker layouts hung on it.
///
/// Bones (segments) are identified by the index of their distal joint:
/// segment `j` runs from `parent(j)` to `j` and its orientation is the global
/// rotation of `parent(j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub format_version: u32,
    pub joints: Vec<Joint>,
    /// Bones whose lengths form the key bone vector, in
    /// [`KEY_BONE_NAMES`] order.
    pub key_bones: [BoneRef; NUM_KEY_BONES],
    /// Joint index observed by each 2D marker.
    pub marker_map: Vec<usize>,
    /// Bone carrying each input IMU.
    pub imu_map: Vec<usize>,
    /// Endpoints tracked by the limb tracker.
    pub limb_endpoints: Vec<usize>,
    pub limb_bones: Vec<usize>,
    /// Endpoints tracked by the body tracker.
    pub body_endpoints: Vec<usize>,
    pub body_bones: Vec<usize>,
}

impl SkeletonConfig {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_markers(&self) -> usize {
        self.marker_map.len()
    }

    pub fn num_imus(&self) -> usize {
        self.imu_map.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.joints[joint].parent
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Rest length of bone `bone` (its distal joint's offset norm).
    pub fn bone_length(&self, bone: usize) -> f64 {
        self.joints[bone].offset().norm()
    }

    pub fn key_bone_lengths(&self) -> [f64; NUM_KEY_BONES] {
        self.key_bones.map(|b| match b {
            BoneRef::Segment(j) => self.bone_length(j),
            BoneRef::EndSite(j) => self.joints[j].end_site.map(|e| Vector3::from(e).norm()).unwrap_or(0.0),
        })
    }

    /// All bones, i.e. every non-root joint index.
    pub fn bones(&self) -> Vec<usize> {
        (0..self.joints.len()).filter(|&j| self.joints[j].parent.is_some()).collect()
    }

    /// Joint-limit table in radians; rows for unconstrained joints are infinite.
    pub fn limits_rad(&self) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        self.joints
            .iter()
            .map(|j| match j.limits_deg {
                Some([lo, hi]) => (
                    Vector3::from(lo).map(f64::to_radians),
                    Vector3::from(hi).map(f64::to_radians),
                ),
                None => (
                    Vector3::repeat(f64::NEG_INFINITY),
                    Vector3::repeat(f64::INFINITY),
                ),
            })
            .unzip()
    }

    /// Same skeleton with a different set of input IMUs.
    pub fn with_imu_map(&self, imu_map: Vec<usize>) -> Result<Self, KinematicsError> {
        let mut s = self.clone();
        s.imu_map = imu_map;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let bad = |msg: String| Err(KinematicsError::InvalidSkeleton(msg));
        if self.joints.is_empty() {
            return bad("no joints".into());
        }
        if self.joints[0].parent.is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (i, j) in self.joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => return bad(format!("joint {} ({}) must have a preceding parent", i, j.name)),
            }
            let n = j.offset().norm();
            if !(n > 0.0) || !n.is_finite() {
                return bad(format!("joint {} ({}) has a zero rest offset", i, j.name));
            }
        }
        for (i, j) in self.joints.iter().enumerate() {
            if let Some([lo, hi]) = j.limits_deg {
                if (0..3).any(|k| !(lo[k] <= hi[k])) {
                    return bad(format!("joint {} ({}) has inverted limits", i, j.name));
                }
            }
        }
        let n = self.joints.len();
        let in_range = |v: &[usize]| v.iter().all(|&x| x < n);
        let bones_ok = |v: &[usize]| v.iter().all(|&x| x > 0 && x < n);
        if !in_range(&self.marker_map) || !in_range(&self.limb_endpoints) || !in_range(&self.body_endpoints) {
            return bad("marker or endpoint index out of range".into());
        }
        if !bones_ok(&self.imu_map) || !bones_ok(&self.limb_bones) || !bones_ok(&self.body_bones) {
            return bad("bone index out of range".into());
        }
        for k in &self.key_bones {
            let ok = match *k {
                BoneRef::Segment(j) => j > 0 && j < n,
                BoneRef::EndSite(j) => j < n && self.joints[j].end_site.is_some_and(|e| Vector3::from(e).norm() > 0.0),
            };
            if !ok {
                return bad(format!("key bone {:?} does not exist", k));
            }
        }
        let limb_known: Vec<usize> = self.limb_endpoints.clone();
        for &b in &self.limb_bones {
            let p = self.joints[b].parent.unwrap_or(0);
            if !limb_known.contains(&b) || !limb_known.contains(&p) {
                return bad(format!("limb bone {} has an untracked endpoint", b));
            }
        }
        for &b in &self.body_bones {
            let p = self.joints[b].parent.unwrap_or(0);
            for e in [p, b] {
                if e != 0 && !self.body_endpoints.contains(&e) && !self.limb_endpoints.contains(&e) {
                    return bad(format!("body bone {} has an untracked endpoint", b));
                }
            }
        }
        Ok(())
    }

    /// 19-joint stick humanoid.
    ///
    /// Frame: +x to the actor's right, +y forward, +z up. The rest pose is an
    /// A-pose with the upper arms 45 degrees below horizontal. Joints sit at
    /// the proximal end of the bone they are named after (`l_lowarm` is the
    /// elbow); the foot bone ends at an end site (the toe).
    ///
    /// Sensors ride on both forearms (segments 8, 12) and both shanks
    /// (segments 15, 18). The limb tracker follows the elbows, wrists, knees
    /// and ankles; the body tracker follows chest, neck, head, shoulders and
    /// hips, constrained by the neck, head, upper-arm, pelvis-to-hip and
    /// thigh segments. Spine and clavicle joints are left to the IK stage.
    pub fn default_humanoid() -> Self {
        const BALL: Option<[[f64; 3]; 2]> = Some([[-150.0; 3], [150.0; 3]]);
        const KNEE: Option<[[f64; 3]; 2]> = Some([[-150.0, -30.0, -30.0], [5.0, 30.0, 30.0]]);
        let j = |name: &str, parent: Option<usize>, offset: [f64; 3], limits| Joint {
            name: name.to_string(),
            parent,
            offset,
            limits_deg: limits,
            end_site: None,
        };
        let mut joints = vec![
            j("pelvis", None, [0.0, 0.0, 0.0], None),
            j("spine", Some(0), [0.0, 0.0, 0.12], BALL),
            j("chest", Some(1), [0.0, 0.0, 0.24], BALL),
            j("neck", Some(2), [0.0, 0.0, 0.2], BALL),
            j("head", Some(3), [0.0, 0.0, 0.12], BALL),
            j("l_clavicle", Some(2), [-0.03, 0.0, 0.17], BALL),
            j("l_uparm", Some(5), [-0.14, 0.0, 0.0], BALL),
            j("l_lowarm", Some(6), [-0.2, 0.0, -0.2], BALL),
            j("l_hand", Some(7), [-0.18, 0.0, -0.18], BALL),
            j("r_clavicle", Some(2), [0.03, 0.0, 0.17], BALL),
            j("r_uparm", Some(9), [0.14, 0.0, 0.0], BALL),
            j("r_lowarm", Some(10), [0.2, 0.0, -0.2], BALL),
            j("r_hand", Some(11), [0.18, 0.0, -0.18], BALL),
            j("l_upleg", Some(0), [-0.09, 0.0, -0.06], BALL),
            j("l_lowleg", Some(13), [0.0, 0.0, -0.42], KNEE),
            j("l_foot", Some(14), [0.0, 0.0, -0.42], BALL),
            j("r_upleg", Some(0), [0.09, 0.0, -0.06], BALL),
            j("r_lowleg", Some(16), [0.0, 0.0, -0.42], KNEE),
            j("r_foot", Some(17), [0.0, 0.0, -0.42], BALL),
        ];
        joints[4].end_site = Some([0.0, 0.0, 0.12]);
        joints[8].end_site = Some([-0.06, 0.0, -0.06]);
        joints[12].end_site = Some([0.06, 0.0, -0.06]);
        joints[15].end_site = Some([0.0, 0.14, -0.06]);
        joints[18].end_site = Some([0.0, 0.14, -0.06]);
        SkeletonConfig {
            format_version: SKELETON_FORMAT_VERSION,
            joints,
            key_bones: [
                BoneRef::Segment(7),
                BoneRef::Segment(8),
                BoneRef::Segment(14),
                BoneRef::Segment(15),
                BoneRef::EndSite(15),
                BoneRef::Segment(6),
                BoneRef::Segment(2),
            ],
            marker_map: (0..19).collect(),
            imu_map: vec![8, 12, 15, 18],
            limb_endpoints: vec![7, 8, 11, 12, 14, 15, 17, 18],
            limb_bones: vec![8, 12, 15, 18],
            body_endpoints: vec![2, 3, 4, 6, 10, 13, 16],
            body_bones: vec![3, 4, 7, 11, 13, 14, 16, 17],
        }
    }

    /// Two-sensor variant: right forearm and left shank.
    pub fn two_imu_humanoid() -> Self {
        let mut s = Self::default_humanoid();
        s.imu_map = vec![12, 15];
        s
    }
}
