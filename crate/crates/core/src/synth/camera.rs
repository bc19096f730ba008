use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::kinematics::{is_rotation, MotionSequence, PoseFrame, Rotation6D, SO3_TOLERANCE};

/// Smallest camera-frame depth that still projects.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera. Extrinsics map capture-frame points into the camera frame
/// (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(SynthError::InvalidCamera(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !is_rotation(&self.rotation, SO3_TOLERANCE) {
            return Err(SynthError::InvalidCamera("extrinsic rotation is not in SO(3)".into()));
        }
        Ok(())
    }

    /// Camera placed at `eye` looking at `target`, with `up` pointing up in
    /// the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, f: f64, width: u32, height: u32) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        CameraModel {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
            width,
            height,
        }
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Pinhole projection of a camera-frame point, without the depth check.
pub fn project_unchecked(camera: &CameraModel, xc: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(camera.fx * xc.x / xc.z + camera.cx, camera.fy * xc.y / xc.z + camera.cy)
}

/// Projects a capture-frame point to pixels.
pub fn project(camera: &CameraModel, x: &Vector3<f64>) -> Result<Vector2<f64>, SynthError> {
    let xc = camera.to_camera(x);
    if !(xc.z > MIN_DEPTH) {
        return Err(SynthError::BehindCamera { depth: xc.z });
    }
    Ok(project_unchecked(camera, &xc))
}

pub fn canonicalize(p: &Vector2<f64>, camera: &CameraModel) -> Vector2<f64> {
    Vector2::new((p.x - camera.cx) / camera.fx, (p.y - camera.cy) / camera.fy)
}

/// Maps pixel keypoints onto the Z=1 plane of their camera.
pub fn canonicalize_keypoints(p: &[Vector2<f64>], camera: &CameraModel) -> Vec<Vector2<f64>> {
    p.iter().map(|q| canonicalize(q, camera)).collect()
}

/// A set of cameras around a stage. The capture frame is camera 0's frame;
/// `stage_rotation`/`stage_translation` map stage coordinates (z up) into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub cameras: Vec<CameraModel>,
    pub stage_rotation: Matrix3<f64>,
    pub stage_translation: Vector3<f64>,
}

impl Rig {
    /// `n` cameras evenly spaced on a horizontal ring around the stage origin,
    /// all aimed at `target`. Camera 0 sits on the +y axis.
    pub fn ring(n: usize, radius: f64, height: f64, target: Vector3<f64>, f: f64, width: u32, image_height: u32) -> Self {
        let up = Vector3::z();
        let stage_cams: Vec<CameraModel> = (0..n)
            .map(|i| {
                let phi = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / n as f64;
                let eye = Vector3::new(radius * phi.cos(), radius * phi.sin(), height);
                CameraModel::look_at(eye, target, up, f, width, image_height)
            })
            .collect();
        Self::from_stage_cameras(&stage_cams)
    }

    /// Re-expresses stage-frame cameras relative to the first one.
    pub fn from_stage_cameras(stage_cams: &[CameraModel]) -> Self {
        let r0 = stage_cams[0].rotation;
        let c0 = stage_cams[0].center();
        let cameras = stage_cams
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut cam = c.clone();
                if i == 0 {
                    cam.rotation = Matrix3::identity();
                    cam.translation = Vector3::zeros();
                } else {
                    cam.rotation = c.rotation * r0.transpose();
                    cam.translation = c.rotation * (c0 - c.center());
                }
                cam
            })
            .collect();
        Rig {
            cameras,
            stage_rotation: r0,
            stage_translation: -(r0 * c0),
        }
    }

    /// Four cameras on a 3 m ring at 1.5 m, 800 px focal length, 1024x768.
    pub fn desk() -> Self {
        Self::ring(4, 3.0, 1.5, Vector3::new(0.0, 0.0, 1.0), 800.0, 1024, 768)
    }

    pub fn stage_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.stage_rotation * x + self.stage_translation
    }

    pub fn stage_orientation(&self, r: &Matrix3<f64>) -> Matrix3<f64> {
        self.stage_rotation * r
    }

    /// Moves a stage-frame pose into the capture frame (only the root changes).
    pub fn stage_pose(&self, pose: &PoseFrame) -> Result<PoseFrame, crate::kinematics::KinematicsError> {
        let root = crate::kinematics::rotation6d_to_matrix(&pose.theta_6d[0])?;
        let r = self.stage_rotation * root;
        let mut out = pose.clone();
        out.theta_6d[0] = Rotation6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]);
        out.t = self.stage_point(&pose.t);
        Ok(out)
    }

    pub fn stage_motion(&self, seq: &MotionSequence) -> Result<MotionSequence, crate::kinematics::KinematicsError> {
        Ok(MotionSequence {
            fps: seq.fps,
            frames: seq.frames.iter().map(|f| self.stage_pose(f)).collect::<Result<_, _>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::matrix_to_euler;

    fn simple() -> CameraModel {
        CameraModel {
            fx: 1000.0,
            fy: 900.0,
            cx: 500.0,
            cy: 400.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width: 1000,
            height: 800,
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project(&simple(), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(500.0, 400.0));
        let p = project(&simple(), &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(1000.0, 400.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        assert!(matches!(project(&simple(), &Vector3::new(0.0, 0.0, -1.0)), Err(SynthError::BehindCamera { .. })));
        assert!(project(&simple(), &Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn canonicalize_inverts_intrinsics() {
        let c = simple();
        assert_eq!(canonicalize(&Vector2::new(500.0, 400.0), &c), Vector2::zeros());
        assert_eq!(canonicalize(&Vector2::new(1500.0, 400.0), &c), Vector2::new(1.0, 0.0));
    }

    #[test]
    fn ring_rig_layout() {
        let rig = Rig::desk();
        assert_eq!(rig.cameras.len(), 4);
        assert_eq!(rig.cameras[0].rotation, Matrix3::identity());
        for c in &rig.cameras {
            c.validate().unwrap();
            // the stage target is in front of every camera, near the image centre
            let target = rig.stage_point(&Vector3::new(0.0, 0.0, 1.0));
            let p = project(c, &target).unwrap();
            assert!((p - Vector2::new(512.0, 384.0)).norm() < 1e-9);
        }
        // stage yaw is the last Euler angle once mapped to the capture frame
        let d = matrix_to_euler(&rig.stage_rotation).unwrap();
        assert!(d.angles.y.abs() < 1e-12);
        // camera 0 sees the actor's right side on the image left
        let right = rig.stage_point(&Vector3::new(0.3, 0.0, 1.0));
        assert!(project(&rig.cameras[0], &right).unwrap().x < 512.0);
    }

    #[test]
    fn invalid_camera() {
        let mut c = simple();
        c.fx = 0.0;
        assert!(c.validate().is_err());
        let mut c = simple();
        c.rotation[(0, 0)] = 2.0;
        assert!(c.validate().is_err());
    }
}
