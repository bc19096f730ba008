use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::kinematics::rotation::{rot_x, rot_y, rot_z};
use crate::kinematics::{euler_to_matrix, MotionSequence, PoseFrame, SkeletonConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Reach,
    Squat,
    Spin,
    DanceLoop,
    RandomSpline,
}

impl MotionKind {
    pub const ALL: [MotionKind; 5] = [
        MotionKind::Reach,
        MotionKind::Squat,
        MotionKind::Spin,
        MotionKind::DanceLoop,
        MotionKind::RandomSpline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Reach => "reach",
            MotionKind::Squat => "squat",
            MotionKind::Spin => "spin",
            MotionKind::DanceLoop => "dance_loop",
            MotionKind::RandomSpline => "random_spline",
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        MotionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown motion kind {:?}", s))
    }
}

/// Standing pelvis height: hip drop, thigh, shank and the foot's toe drop.
const PELVIS_HEIGHT: f64 = 0.96;

/// Joint indices of the humanoid layout the generator drives.
struct Rig {
    n: usize,
    spine: usize,
    chest: usize,
    neck: usize,
    head: usize,
    clav: [usize; 2],
    shoulder: [usize; 2],
    elbow: [usize; 2],
    wrist: [usize; 2],
    hip: [usize; 2],
    knee: [usize; 2],
    ankle: [usize; 2],
    thigh: f64,
    shank: f64,
    hip_drop: f64,
}

impl Rig {
    fn new(s: &SkeletonConfig) -> Result<Self, SynthError> {
        let idx = |name: &str| s.joint_index(name).ok_or_else(|| SynthError::UnknownJoint(name.to_string()));
        let pair = |a: &str, b: &str| -> Result<[usize; 2], SynthError> { Ok([idx(a)?, idx(b)?]) };
        let knee = pair("l_lowleg", "r_lowleg")?;
        let ankle = pair("l_foot", "r_foot")?;
        let hip = pair("l_upleg", "r_upleg")?;
        Ok(Rig {
            n: s.num_joints(),
            spine: idx("spine")?,
            chest: idx("chest")?,
            neck: idx("neck")?,
            head: idx("head")?,
            clav: pair("l_clavicle", "r_clavicle")?,
            shoulder: pair("l_uparm", "r_uparm")?,
            elbow: pair("l_lowarm", "r_lowarm")?,
            wrist: pair("l_hand", "r_hand")?,
            hip,
            knee,
            ankle,
            thigh: s.bone_length(knee[0]),
            shank: s.bone_length(ankle[0]),
            hip_drop: -s.joints[hip[0]].offset[2],
        })
    }
}

/// `amp * sin(2 pi freq t + phase)`.
#[derive(Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, amp: (f64, f64), freq: (f64, f64)) -> Self {
        Wave {
            amp: rng.random_range(amp.0..=amp.1),
            freq: rng.random_range(freq.0..=freq.1),
            phase: rng.random_range(0.0..TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (TAU * self.freq * t + self.phase).sin()
    }

    /// Same wave mapped to `[0, amp]`.
    fn bump(&self, t: f64) -> f64 {
        0.5 * self.amp * (1.0 - (TAU * self.freq * t + self.phase).cos())
    }
}

/// Uniform cubic B-spline through random control points.
struct Spline {
    ctrl: Vec<f64>,
    spacing: f64,
}

impl Spline {
    fn random(rng: &mut ChaCha8Rng, frames: usize, spacing: usize, lo: f64, hi: f64) -> Self {
        let count = (frames - 1) / spacing + 4;
        Spline {
            ctrl: (0..count).map(|_| rng.random_range(lo..=hi)).collect(),
            spacing: spacing as f64,
        }
    }

    fn at(&self, frame: usize) -> f64 {
        let u = frame as f64 / self.spacing;
        let i = (u.floor() as usize).min(self.ctrl.len() - 4);
        let s = u - i as f64;
        let p = &self.ctrl[i..i + 4];
        let s2 = s * s;
        let s3 = s2 * s;
        ((1.0 - s).powi(3) * p[0] + (3.0 * s3 - 6.0 * s2 + 4.0) * p[1] + (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) * p[2] + s3 * p[3])
            / 6.0
    }
}

/// Per-frame pose before assembly: local Euler angles per joint (entry 0
/// unused), root yaw/pitch/roll and root position, stage frame.
struct Frame {
    angles: Vec<Vector3<f64>>,
    yaw: f64,
    pitch: f64,
    roll: f64,
    root: Vector3<f64>,
}

impl Frame {
    fn rest(n: usize) -> Self {
        Frame {
            angles: vec![Vector3::zeros(); n],
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            root: Vector3::new(0.0, 0.0, PELVIS_HEIGHT),
        }
    }

    fn into_pose(self) -> PoseFrame {
        let mut mats: Vec<Matrix3<f64>> = self.angles.iter().map(euler_to_matrix).collect();
        mats[0] = rot_z(self.yaw) * rot_x(self.pitch) * rot_y(self.roll);
        PoseFrame::from_matrices(&mats, self.root).expect("generated matrices are rotations")
    }
}

/// Scripted skeletal motion in the stage frame (z up, actor facing +y).
///
/// All joint-angle tracks are sums of sinusoids or uniform cubic B-splines,
/// so they are C2-smooth; amplitudes are chosen inside the default joint
/// limits. `reach` moves only the arm joints. The same seed always gives the
/// same sequence.
pub fn generate_motion(
    skeleton: &SkeletonConfig,
    kind: MotionKind,
    frames: usize,
    fps: f64,
    seed: u64,
) -> Result<MotionSequence, SynthError> {
    if frames < 3 {
        return Err(SynthError::TooFewFrames(frames));
    }
    let rig = Rig::new(skeleton)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match kind {
        MotionKind::Reach => reach(&rig, &mut rng, frames, fps),
        MotionKind::Squat => squat(&rig, &mut rng, frames, fps),
        MotionKind::Spin => spin(&rig, &mut rng, frames, fps),
        MotionKind::DanceLoop => dance(&rig, &mut rng, frames, fps),
        MotionKind::RandomSpline => spline(&rig, &mut rng, frames, fps),
    };
    Ok(MotionSequence {
        fps,
        frames: out.into_iter().map(Frame::into_pose).collect(),
    })
}

fn reach(r: &Rig, rng: &mut ChaCha8Rng, frames: usize, fps: f64) -> Vec<Frame> {
    let f = (0.3, 0.8);
    let mut w = || {
        [
            Wave::random(rng, (0.4, 0.7), f),
            Wave::random(rng, (0.1, 0.3), f),
            Wave::random(rng, (0.1, 0.3), f),
            Wave::random(rng, (0.3, 0.7), f),
            Wave::random(rng, (0.05, 0.15), f),
            Wave::random(rng, (0.1, 0.3), f),
        ]
    };
    let sides = [w(), w()];
    (0..frames)
        .map(|i| {
            let t = i as f64 / fps;
            let mut fr = Frame::rest(r.n);
            for (s, w) in sides.iter().enumerate() {
                let sign = if s == 0 { 1.0 } else { -1.0 };
                fr.angles[r.shoulder[s]] = Vector3::new(0.2 + w[0].bump(t) * 2.0, sign * (0.1 + w[1].bump(t)), w[2].at(t));
                fr.angles[r.elbow[s]] = Vector3::new(0.2 + w[3].bump(t), 0.0, 0.0);
                fr.angles[r.clav[s]] = Vector3::new(0.0, 0.0, sign * w[4].bump(t));
                fr.angles[r.wrist[s]] = Vector3::new(w[5].at(t), 0.0, 0.0);
            }
            fr
        })
        .collect()
}

/// Root height and forward shift that keep the ankles planted for the given
/// hip flexion and knee angle (both legs identical).
fn planted_root(r: &Rig, hip: f64, knee: f64) -> (f64, f64) {
    let down = r.hip_drop + r.thigh * hip.cos() + r.shank * (hip + knee).cos();
    let fwd = r.thigh * hip.sin() + r.shank * (hip + knee).sin();
    (PELVIS_HEIGHT - (r.hip_drop + r.thigh + r.shank) + down, -fwd)
}

fn squat(r: &Rig, rng: &mut ChaCha8Rng, frames: usize, fps: f64) -> Vec<Frame> {
    let depth = Wave::random(rng, (0.6, 1.0), (0.25, 0.5));
    let arms = Wave::random(rng, (0.3, 0.6), (0.2, 0.4));
    let lean = rng.random_range(0.15..0.35);
    let yaw = rng.random_range(-PI..PI);
    (0..frames)
        .map(|i| {
            let t = i as f64 / fps;
            let s = depth.bump(t);
            let hip = 1.3 * s;
            let knee = -2.0 * s;
            let mut fr = Frame::rest(r.n);
            for side in 0..2 {
                let sign = if side == 0 { 1.0 } else { -1.0 };
                fr.angles[r.hip[side]] = Vector3::new(hip, 0.0, 0.0);
                fr.angles[r.knee[side]] = Vector3::new(knee, 0.0, 0.0);
                fr.angles[r.ankle[side]] = Vector3::new(0.7 * s, 0.0, 0.0);
                fr.angles[r.shoulder[side]] = Vector3::new(0.3 + 1.2 * s + arms.at(t) * 0.3, sign * 0.2, 0.0);
                fr.angles[r.elbow[side]] = Vector3::new(0.3 + arms.bump(t), 0.0, 0.0);
            }
            fr.angles[r.spine] = Vector3::new(-lean * s, 0.0, 0.0);
            fr.angles[r.chest] = Vector3::new(-0.5 * lean * s, 0.0, 0.0);
            fr.angles[r.neck] = Vector3::new(0.4 * lean * s, 0.0, 0.0);
            let (z, y) = planted_root(r, hip, knee);
            fr.yaw = yaw;
            fr.root = Vector3::new(-y * yaw.sin(), y * yaw.cos(), z);
            fr
        })
        .collect()
}

fn spin(r: &Rig, rng: &mut ChaCha8Rng, frames: usize, fps: f64) -> Vec<Frame> {
    let rate = rng.random_range(0.15..0.35) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let yaw0 = rng.random_range(-PI..PI);
    let step = Wave::random(rng, (0.2, 0.35), (0.8, 1.2));
    let arms = Wave::random(rng, (0.1, 0.3), (0.3, 0.6));
    let drift = [Wave::random(rng, (0.05, 0.2), (0.05, 0.15)), Wave::random(rng, (0.05, 0.2), (0.05, 0.15))];
    (0..frames)
        .map(|i| {
            let t = i as f64 / fps;
            let mut fr = Frame::rest(r.n);
            for side in 0..2 {
                let sign = if side == 0 { 1.0 } else { -1.0 };
                let ph = if side == 0 { 0.0 } else { 0.5 / step.freq };
                fr.angles[r.shoulder[side]] = Vector3::new(0.1, sign * (0.7 + arms.at(t)), 0.0);
                fr.angles[r.elbow[side]] = Vector3::new(0.3, 0.0, 0.0);
                fr.angles[r.hip[side]] = Vector3::new(step.bump(t + ph), sign * 0.05, 0.0);
                fr.angles[r.knee[side]] = Vector3::new(-1.5 * step.bump(t + ph), 0.0, 0.0);
            }
            fr.angles[r.head] = Vector3::new(0.0, 0.0, 0.3 * arms.at(t + 0.3));
            fr.yaw = yaw0 + TAU * rate * t;
            fr.root = Vector3::new(drift[0].at(t), drift[1].at(t), PELVIS_HEIGHT - 0.02 * step.bump(2.0 * t));
            fr
        })
        .collect()
}

fn dance(r: &Rig, rng: &mut ChaCha8Rng, frames: usize, fps: f64) -> Vec<Frame> {
    // every track runs at a harmonic of the loop frequency
    let base = rng.random_range(0.4..0.7);
    let yaw0 = rng.random_range(-PI..PI);
    let mut h = |amp: (f64, f64)| {
        let k = rng.random_range(1..=3) as f64;
        Wave {
            amp: rng.random_range(amp.0..=amp.1),
            freq: base * k,
            phase: rng.random_range(0.0..TAU),
        }
    };
    let sh: Vec<[Wave; 3]> = (0..2).map(|_| [h((0.3, 0.8)), h((0.2, 0.6)), h((0.1, 0.4))]).collect();
    let el: Vec<Wave> = (0..2).map(|_| h((0.3, 0.9))).collect();
    let hp: Vec<[Wave; 2]> = (0..2).map(|_| [h((0.2, 0.5)), h((0.05, 0.2))]).collect();
    let kn: Vec<Wave> = (0..2).map(|_| h((0.2, 0.6))).collect();
    let torso = [h((0.05, 0.2)), h((0.05, 0.2)), h((0.1, 0.3))];
    let neck = h((0.1, 0.3));
    let yaw = h((0.3, 0.8));
    let sway = [h((0.03, 0.1)), h((0.03, 0.1)), h((0.01, 0.03))];
    (0..frames)
        .map(|i| {
            let t = i as f64 / fps;
            let mut fr = Frame::rest(r.n);
            for side in 0..2 {
                let sign = if side == 0 { 1.0 } else { -1.0 };
                fr.angles[r.shoulder[side]] =
                    Vector3::new(0.5 + sh[side][0].at(t), sign * (0.4 + sh[side][1].at(t)), sh[side][2].at(t));
                fr.angles[r.elbow[side]] = Vector3::new(el[side].bump(t) + 0.1, 0.0, 0.0);
                fr.angles[r.hip[side]] = Vector3::new(hp[side][0].bump(t), sign * hp[side][1].bump(t), 0.0);
                fr.angles[r.knee[side]] = Vector3::new(-kn[side].bump(t), 0.0, 0.0);
            }
            fr.angles[r.spine] = Vector3::new(torso[0].at(t), torso[1].at(t), torso[2].at(t));
            fr.angles[r.chest] = Vector3::new(0.5 * torso[0].at(t), 0.5 * torso[1].at(t), 0.5 * torso[2].at(t));
            fr.angles[r.neck] = Vector3::new(0.0, 0.0, neck.at(t));
            fr.yaw = yaw0 + yaw.at(t);
            fr.roll = 0.5 * torso[1].at(t + 0.1);
            fr.root = Vector3::new(sway[0].at(t), sway[1].at(t), PELVIS_HEIGHT - sway[2].bump(t));
            fr
        })
        .collect()
}

fn spline(r: &Rig, rng: &mut ChaCha8Rng, frames: usize, fps: f64) -> Vec<Frame> {
    // every control-point range is narrower than 2 rad and knots are at least
    // 8 frames apart, which bounds the per-frame change by 0.25 rad
    let spacing = ((0.5 * fps).round() as usize).max(8);
    let yaw0 = rng.random_range(-PI..PI);
    let mut sp = |lo: f64, hi: f64| Spline::random(rng, frames, spacing, lo, hi);
    let mut tracks: Vec<(usize, [Spline; 3])> = Vec::new();
    for (j, lo, hi) in [
        (r.spine, [-0.3, -0.2, -0.3], [0.2, 0.2, 0.3]),
        (r.chest, [-0.2, -0.15, -0.2], [0.15, 0.15, 0.2]),
        (r.neck, [-0.3, -0.2, -0.5], [0.3, 0.2, 0.5]),
        (r.head, [-0.3, -0.2, -0.4], [0.3, 0.2, 0.4]),
    ] {
        tracks.push((j, [sp(lo[0], hi[0]), sp(lo[1], hi[1]), sp(lo[2], hi[2])]));
    }
    for side in 0..2 {
        let (ylo, yhi) = if side == 0 { (-0.3, 1.2) } else { (-1.2, 0.3) };
        tracks.push((r.clav[side], [sp(-0.1, 0.1), sp(-0.1, 0.1), sp(-0.15, 0.15)]));
        tracks.push((r.shoulder[side], [sp(-0.5, 1.4), sp(ylo, yhi), sp(-0.6, 0.6)]));
        tracks.push((r.elbow[side], [sp(0.0, 1.6), sp(-0.2, 0.2), sp(-0.3, 0.3)]));
        tracks.push((r.wrist[side], [sp(-0.5, 0.5), sp(-0.3, 0.3), sp(-0.3, 0.3)]));
        tracks.push((r.hip[side], [sp(-0.3, 1.0), sp(-0.3, 0.3), sp(-0.3, 0.3)]));
        tracks.push((r.knee[side], [sp(-1.5, -0.02), sp(-0.1, 0.1), sp(-0.1, 0.1)]));
        tracks.push((r.ankle[side], [sp(-0.3, 0.3), sp(-0.1, 0.1), sp(-0.1, 0.1)]));
    }
    let yaw = sp(-1.5, 0.5);
    let tilt = [sp(-0.1, 0.1), sp(-0.1, 0.1)];
    let pos = [sp(-0.4, 0.4), sp(-0.4, 0.4), sp(-0.08, 0.02)];
    (0..frames)
        .map(|i| {
            let mut fr = Frame::rest(r.n);
            for (j, s) in &tracks {
                fr.angles[*j] = Vector3::new(s[0].at(i), s[1].at(i), s[2].at(i));
            }
            fr.yaw = yaw0 + yaw.at(i);
            fr.pitch = tilt[0].at(i);
            fr.roll = tilt[1].at(i);
            fr.root = Vector3::new(pos[0].at(i), pos[1].at(i), PELVIS_HEIGHT + pos[2].at(i));
            fr
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::motion_to_euler;
    use crate::kinematics::rotation::geodesic_angle;

    fn skel() -> SkeletonConfig {
        SkeletonConfig::default_humanoid()
    }

    #[test]
    fn reach_moves_only_the_arms() {
        let s = skel();
        let m = generate_motion(&s, MotionKind::Reach, 3, 1.0, 4).unwrap();
        let a = &m.frames[0];
        let b = &m.frames[2];
        assert_eq!(a.t, b.t);
        let arms = ["l_clavicle", "l_uparm", "l_lowarm", "l_hand", "r_clavicle", "r_uparm", "r_lowarm", "r_hand"]
            .map(|n| s.joint_index(n).unwrap());
        let mut arm_changed = false;
        for j in 0..19 {
            if arms.contains(&j) {
                arm_changed |= a.theta_6d[j] != b.theta_6d[j];
            } else {
                assert_eq!(a.theta_6d[j], b.theta_6d[j], "joint {}", j);
            }
        }
        assert!(arm_changed);
    }

    #[test]
    fn same_seed_same_motion() {
        for k in MotionKind::ALL {
            let a = generate_motion(&skel(), k, 50, 30.0, 9).unwrap();
            let b = generate_motion(&skel(), k, 50, 30.0, 9).unwrap();
            assert_eq!(a, b);
            let c = generate_motion(&skel(), k, 50, 30.0, 10).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn random_spline_is_smooth() {
        for fps in [10.0, 30.0, 60.0] {
            let m = generate_motion(&skel(), MotionKind::RandomSpline, 240, fps, 3).unwrap();
            let (e, lock) = motion_to_euler(&m).unwrap();
            assert!(!lock);
            for w in e.frames.windows(2) {
                for j in 1..19 {
                    let d = (w[1].angles[j] - w[0].angles[j]).amax();
                    assert!(d < PI / 8.0, "joint {} jumped {}", j, d);
                }
            }
        }
    }

    #[test]
    fn motions_respect_joint_limits() {
        let s = skel();
        let (lo, hi) = s.limits_rad();
        for k in MotionKind::ALL {
            for seed in 0..5 {
                let m = generate_motion(&s, k, 200, 30.0, seed).unwrap();
                let (e, lock) = motion_to_euler(&m).unwrap();
                assert!(!lock, "{} hit gimbal lock", k);
                for f in &e.frames {
                    for j in 1..19 {
                        for a in 0..3 {
                            assert!(f.angles[j][a] >= lo[j][a] && f.angles[j][a] <= hi[j][a], "{} joint {}", k, j);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn squat_keeps_feet_planted() {
        let s = skel();
        let m = generate_motion(&s, MotionKind::Squat, 120, 30.0, 2).unwrap();
        let ankle = s.joint_index("l_foot").unwrap();
        let first = crate::kinematics::forward_kinematics(&s, &m.frames[0]).unwrap().joint_positions[ankle];
        for f in &m.frames {
            let p = crate::kinematics::forward_kinematics(&s, f).unwrap().joint_positions[ankle];
            assert!((p - first).norm() < 1e-9);
        }
    }

    #[test]
    fn spin_turns() {
        let m = generate_motion(&skel(), MotionKind::Spin, 240, 30.0, 1).unwrap();
        let a = m.frames[0].rotation_matrices().unwrap()[0];
        let b = m.frames[60].rotation_matrices().unwrap()[0];
        assert!(geodesic_angle(&a, &b) > 0.5);
    }

    #[test]
    fn short_sequences_are_rejected() {
        assert!(matches!(
            generate_motion(&skel(), MotionKind::Reach, 2, 30.0, 0),
            Err(SynthError::TooFewFrames(2))
        ));
    }
}
