use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::tape::{CameraConst, Tape, Var};
use super::InferenceError;
use crate::kinematics::rotation::to_row_major;
use crate::kinematics::SkeletonConfig;
use crate::synth::{CameraModel, FrameSample};

/// Weights of the IK objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l2d: f64,
    pub acc: f64,
    pub ori: f64,
    pub prior: f64,
    pub trans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l2d: 1.0,
            acc: 10.0,
            ori: 30.0,
            prior: 0.01,
            trans: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            l2d: 0.0,
            acc: 0.0,
            ori: 0.0,
            prior: 0.0,
            trans: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let all = [self.l2d, self.acc, self.ori, self.prior, self.trans];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(InferenceError::InvalidInput("loss weights must be finite and non-negative".into()))
        }
    }
}

pub fn camera_const(c: &CameraModel) -> CameraConst {
    CameraConst {
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        r: to_row_major(&c.rotation),
        t: [c.translation.x, c.translation.y, c.translation.z],
    }
}

/// Per-frame predicted positions of a set of joints, 3 values per joint in
/// the order of `joints`, relative to the root.
#[derive(Debug, Clone, Copy)]
pub struct JointTrack<'a> {
    pub joints: &'a [usize],
    pub frames: &'a [Var],
}

fn marker_of(skeleton: &SkeletonConfig, joint: usize) -> Option<usize> {
    skeleton.marker_map.iter().position(|&m| m == joint)
}

fn check_frames(expected: usize, found: usize) -> Result<(), InferenceError> {
    if expected != found {
        return Err(InferenceError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Confidence-weighted reprojection error of root-relative joints shifted by
/// `t_ref`, over every frame and every camera with keypoints.
pub fn loss_joint(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    cameras: &[CameraModel],
    track: JointTrack,
    t_ref: &[Vector3<f64>],
    frames: &[FrameSample],
) -> Result<Var, InferenceError> {
    check_frames(frames.len(), track.frames.len())?;
    check_frames(frames.len(), t_ref.len())?;
    let markers: Vec<Option<usize>> = track.joints.iter().map(|&j| marker_of(skeleton, j)).collect();
    let mut terms = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let offset = tape.leaf(t_ref[f].as_slice());
        for kp in &frame.keypoints {
            let cam = cameras.get(kp.camera).ok_or(InferenceError::DimensionMismatch {
                expected: kp.camera + 1,
                found: cameras.len(),
            })?;
            let targets: Vec<[f64; 3]> = markers
                .iter()
                .map(|m| match m {
                    Some(m) => [kp.p[*m].x, kp.p[*m].y, kp.sigma[*m]],
                    None => [0.0, 0.0, 0.0],
                })
                .collect();
            terms.push(tape.reprojection(track.frames[f], Some(offset), camera_const(cam), &targets));
        }
    }
    Ok(tape.add_all(&terms))
}

fn locate(tracks: &[JointTrack], joint: usize) -> Option<(usize, usize)> {
    tracks
        .iter()
        .enumerate()
        .find_map(|(t, tr)| tr.joints.iter().position(|&j| j == joint).map(|i| (t, i)))
}

/// Squared deviation of predicted bone lengths from the skeleton. Bone `b`
/// joins `parent(b)` and `b`; the root sits at the origin.
pub fn loss_bone(tape: &mut Tape, skeleton: &SkeletonConfig, bones: &[usize], tracks: &[JointTrack]) -> Result<Var, InferenceError> {
    let n = tracks.first().map(|t| t.frames.len()).unwrap_or(0);
    for t in tracks {
        check_frames(n, t.frames.len())?;
    }
    let mut ends = Vec::with_capacity(bones.len());
    for &b in bones {
        let p = skeleton
            .parent(b)
            .ok_or_else(|| InferenceError::InvalidInput(format!("joint {b} is not a bone")))?;
        let find = |j: usize| -> Result<Option<(usize, usize)>, InferenceError> {
            if j == 0 {
                return Ok(None);
            }
            locate(tracks, j)
                .map(Some)
                .ok_or_else(|| InferenceError::InvalidInput(format!("joint {j} is not predicted")))
        };
        ends.push((find(p)?, find(b)?, skeleton.bone_length(b)));
    }
    let mut terms = Vec::new();
    for f in 0..n {
        for &(a, b, len) in &ends {
            let d: Vec<Vec<(Var, usize, f64)>> = (0..3)
                .map(|k| {
                    let mut e = Vec::with_capacity(2);
                    if let Some((t, i)) = b {
                        e.push((tracks[t].frames[f], 3 * i + k, 1.0));
                    }
                    if let Some((t, i)) = a {
                        e.push((tracks[t].frames[f], 3 * i + k, -1.0));
                    }
                    e
                })
                .collect();
            let d = tape.gather(&d);
            let l = tape.norm(d);
            let target = tape.leaf(&[len]);
            let r = tape.sub(l, target);
            terms.push(tape.sum_sq(r));
        }
    }
    Ok(tape.add_all(&terms))
}

/// Limb tracker objective: joint plus bone term on the limb endpoints.
pub fn loss_limb(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    cameras: &[CameraModel],
    limb: &[Var],
    t_ref: &[Vector3<f64>],
    frames: &[FrameSample],
) -> Result<Var, InferenceError> {
    let track = JointTrack {
        joints: &skeleton.limb_endpoints,
        frames: limb,
    };
    let j = loss_joint(tape, skeleton, cameras, track, t_ref, frames)?;
    let b = loss_bone(tape, skeleton, &skeleton.limb_bones, &[track])?;
    Ok(tape.add(j, b))
}

/// Body tracker objective. Body bones may end on limb endpoints, so the
/// limb predictions are needed too.
pub fn loss_body(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    cameras: &[CameraModel],
    limb: &[Var],
    body: &[Var],
    t_ref: &[Vector3<f64>],
    frames: &[FrameSample],
) -> Result<Var, InferenceError> {
    let bt = JointTrack {
        joints: &skeleton.body_endpoints,
        frames: body,
    };
    let lt = JointTrack {
        joints: &skeleton.limb_endpoints,
        frames: limb,
    };
    let j = loss_joint(tape, skeleton, cameras, bt, t_ref, frames)?;
    let b = loss_bone(tape, skeleton, &skeleton.body_bones, &[bt, lt])?;
    Ok(tape.add(j, b))
}

/// Pose predicted by the IK solver and root tracker, expanded by forward
/// kinematics on the tape.
#[derive(Debug, Clone)]
pub struct IkPrediction {
    /// Per frame, per joint local rotation (row-major 3x3).
    pub locals: Vec<Vec<Var>>,
    /// Per frame, per joint accumulated rotation.
    pub globals: Vec<Vec<Var>>,
    /// Per frame root-relative joint positions (3 per joint).
    pub joints: Vec<Var>,
    /// Per frame root translation.
    pub trans: Vec<Var>,
}

/// Forward kinematics with the root at the origin. Returns the global
/// rotations and the stacked joint positions.
pub fn tape_fk(tape: &mut Tape, skeleton: &SkeletonConfig, locals: &[Var]) -> (Vec<Var>, Var) {
    let n = skeleton.num_joints();
    assert_eq!(locals.len(), n);
    let mut globals = Vec::with_capacity(n);
    let mut pos: Vec<Option<Var>> = Vec::with_capacity(n);
    globals.push(locals[0]);
    pos.push(None);
    for j in 1..n {
        let p = skeleton.joints[j].parent.expect("validated skeleton");
        let g = tape.mat3_mul(globals[p], locals[j]);
        let off = tape.leaf(&skeleton.joints[j].offset);
        let step = tape.mat3_vec(globals[p], off);
        let x = match pos[p] {
            Some(pp) => tape.add(pp, step),
            None => step,
        };
        globals.push(g);
        pos.push(Some(x));
    }
    let entries: Vec<Vec<(Var, usize, f64)>> = pos
        .iter()
        .flat_map(|p| (0..3).map(move |k| p.map(|v| vec![(v, k, 1.0)]).unwrap_or_default()))
        .collect();
    let joints = tape.gather(&entries);
    (globals, joints)
}

impl IkPrediction {
    /// Builds the prediction from per-frame 6D outputs (`6 N_J` each) and
    /// translations.
    pub fn from_outputs(tape: &mut Tape, skeleton: &SkeletonConfig, theta: &[Var], trans: &[Var]) -> Self {
        let n = skeleton.num_joints();
        let mut locals = Vec::with_capacity(theta.len());
        let mut globals = Vec::with_capacity(theta.len());
        let mut joints = Vec::with_capacity(theta.len());
        for th in theta {
            let loc: Vec<Var> = (0..n)
                .map(|j| {
                    let s = tape.slice(*th, 6 * j, 6);
                    tape.gram_schmidt(s)
                })
                .collect();
            let (g, p) = tape_fk(tape, skeleton, &loc);
            locals.push(loc);
            globals.push(g);
            joints.push(p);
        }
        IkPrediction {
            locals,
            globals,
            joints,
            trans: trans.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// Individual IK terms, unweighted, plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct IkLoss {
    pub total: Var,
    pub l2d: Var,
    pub acc: Var,
    pub ori: Var,
    pub prior: Var,
    pub trans: Var,
}

/// Reprojection of all markers of the predicted pose into every camera.
pub fn loss_ik_2d(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    cameras: &[CameraModel],
    pred: &IkPrediction,
    frames: &[FrameSample],
) -> Result<Var, InferenceError> {
    check_frames(frames.len(), pred.len())?;
    let mut terms = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let markers: Vec<Vec<(Var, usize, f64)>> = skeleton
            .marker_map
            .iter()
            .flat_map(|&j| (0..3).map(move |k| vec![(pred.joints[f], 3 * j + k, 1.0)]))
            .collect();
        let pts = tape.gather(&markers);
        for kp in &frame.keypoints {
            let cam = cameras.get(kp.camera).ok_or(InferenceError::DimensionMismatch {
                expected: kp.camera + 1,
                found: cameras.len(),
            })?;
            let targets: Vec<[f64; 3]> = (0..skeleton.num_markers()).map(|m| [kp.p[m].x, kp.p[m].y, kp.sigma[m]]).collect();
            terms.push(tape.reprojection(pts, Some(pred.trans[f]), camera_const(cam), &targets));
        }
    }
    Ok(tape.add_all(&terms))
}

/// Second-difference accelerations of the predicted sensor positions
/// against the calibrated measurements, over interior frames.
pub fn loss_ik_acc(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    pred: &IkPrediction,
    frames: &[FrameSample],
    sensors: &[usize],
) -> Result<Var, InferenceError> {
    check_frames(frames.len(), pred.len())?;
    if frames.len() < 3 {
        return Err(InferenceError::SequenceTooShort(frames.len()));
    }
    let mut positions = Vec::with_capacity(frames.len());
    for f in 0..frames.len() {
        let mut entries = Vec::with_capacity(3 * sensors.len());
        for &b in sensors {
            let p = skeleton
                .parent(b)
                .ok_or_else(|| InferenceError::InvalidInput(format!("sensor on root joint {b}")))?;
            for k in 0..3 {
                entries.push(vec![
                    (pred.joints[f], 3 * p + k, 0.5),
                    (pred.joints[f], 3 * b + k, 0.5),
                    (pred.trans[f], k, 1.0),
                ]);
            }
        }
        positions.push(tape.gather(&entries));
    }
    let mut terms = Vec::new();
    for f in 1..frames.len() - 1 {
        let st = frames[f].sampling_time;
        let mut measured = Vec::with_capacity(3 * sensors.len());
        for &b in sensors {
            let s = frames[f].imu(b).ok_or(crate::synth::SynthError::MissingSensor(b))?;
            measured.extend_from_slice(s.acceleration.as_slice());
        }
        let two = tape.scale(positions[f], 2.0);
        let a = tape.sub(positions[f + 1], two);
        let a = tape.add(a, positions[f - 1]);
        let a = tape.scale(a, 1.0 / (st * st));
        let m = tape.leaf(&measured);
        let r = tape.sub(a, m);
        terms.push(tape.sum_sq(r));
    }
    Ok(tape.add_all(&terms))
}

/// Squared Frobenius distance between predicted bone orientations and the
/// calibrated sensor orientations.
pub fn loss_ik_ori(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    pred: &IkPrediction,
    frames: &[FrameSample],
    sensors: &[usize],
) -> Result<Var, InferenceError> {
    check_frames(frames.len(), pred.len())?;
    let mut terms = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let mut entries = Vec::with_capacity(9 * sensors.len());
        let mut measured = Vec::with_capacity(9 * sensors.len());
        for &b in sensors {
            let p = skeleton
                .parent(b)
                .ok_or_else(|| InferenceError::InvalidInput(format!("sensor on root joint {b}")))?;
            let s = frame.imu(b).ok_or(crate::synth::SynthError::MissingSensor(b))?;
            measured.extend_from_slice(&to_row_major(&s.orientation));
            for k in 0..9 {
                entries.push(vec![(pred.globals[f][p], k, 1.0)]);
            }
        }
        let g = tape.gather(&entries);
        let m = tape.leaf(&measured);
        let r = tape.sub(g, m);
        terms.push(tape.sum_sq(r));
    }
    Ok(tape.add_all(&terms))
}

/// Squared Frobenius distance of every local rotation to the reference
/// pose.
pub fn loss_prior(tape: &mut Tape, pred: &IkPrediction, frames: &[FrameSample]) -> Result<Var, InferenceError> {
    check_frames(frames.len(), pred.len())?;
    let mut terms = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let refs = frame.pose.rotation_matrices()?;
        check_frames(refs.len(), pred.locals[f].len())?;
        let mut entries = Vec::with_capacity(9 * refs.len());
        let mut target = Vec::with_capacity(9 * refs.len());
        for (j, r) in refs.iter().enumerate() {
            target.extend_from_slice(&to_row_major(r));
            for k in 0..9 {
                entries.push(vec![(pred.locals[f][j], k, 1.0)]);
            }
        }
        let g = tape.gather(&entries);
        let m = tape.leaf(&target);
        let r = tape.sub(g, m);
        terms.push(tape.sum_sq(r));
    }
    Ok(tape.add_all(&terms))
}

/// Squared distance of the predicted translation to the reference.
pub fn loss_trans(tape: &mut Tape, pred: &IkPrediction, frames: &[FrameSample]) -> Result<Var, InferenceError> {
    check_frames(frames.len(), pred.len())?;
    let mut terms = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let m = tape.leaf(frame.pose.t.as_slice());
        let r = tape.sub(pred.trans[f], m);
        terms.push(tape.sum_sq(r));
    }
    Ok(tape.add_all(&terms))
}

/// Weighted IK objective with its per-term breakdown. `sensors` is the
/// supervision IMU set.
pub fn loss_ik(
    tape: &mut Tape,
    skeleton: &SkeletonConfig,
    cameras: &[CameraModel],
    pred: &IkPrediction,
    frames: &[FrameSample],
    sensors: &[usize],
    weights: &LossWeights,
) -> Result<IkLoss, InferenceError> {
    weights.validate()?;
    if frames.len() < 3 {
        return Err(InferenceError::SequenceTooShort(frames.len()));
    }
    let l2d = loss_ik_2d(tape, skeleton, cameras, pred, frames)?;
    let acc = loss_ik_acc(tape, skeleton, pred, frames, sensors)?;
    let ori = loss_ik_ori(tape, skeleton, pred, frames, sensors)?;
    let prior = loss_prior(tape, pred, frames)?;
    let trans = loss_trans(tape, pred, frames)?;
    let parts = [
        tape.scale(l2d, weights.l2d),
        tape.scale(acc, weights.acc),
        tape.scale(ori, weights.ori),
        tape.scale(prior, weights.prior),
        tape.scale(trans, weights.trans),
    ];
    let total = tape.add_all(&parts);
    Ok(IkLoss {
        total,
        l2d,
        acc,
        ori,
        prior,
        trans,
    })
}
