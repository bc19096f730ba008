//! Levenberg-Marquardt refinement of a motion against the raw observations,
//! parameterised by XYZ Euler angles with box limits.

mod banded;

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use banded::{BandCholesky, BandMatrix};

use crate::inference::tape::{CameraConst, Tape, Var, BEHIND_CAMERA_RESIDUAL};
use crate::inference::{camera_const, tape_fk};
use crate::kinematics::rotation::{slerp, to_row_major};
use crate::kinematics::{
    euler_to_matrix, euler_to_motion, matrix_to_euler, forward_kinematics, forward_kinematics_matrices, motion_to_euler, EulerMotion, EulerPose,
    KinematicsError, MotionSequence, SkeletonConfig,
};
use crate::synth::{sensor_accelerations, CameraModel, FrameSample, KeypointObservation, SynthError};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("joint {joint} angle {axis} = {value} outside [{min}, {max}]")]
    LimitViolation {
        joint: usize,
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("normal equations stayed singular up to the maximum damping")]
    SingularNormalEquations,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Weights of the refinement energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyWeights {
    pub w3d: f64,
    pub w2d: f64,
    pub acc: f64,
    pub ori: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            w3d: 10.0,
            w2d: 1.0,
            acc: 10.0,
            ori: 30.0,
        }
    }
}

impl EnergyWeights {
    pub fn zero() -> Self {
        EnergyWeights {
            w3d: 0.0,
            w2d: 0.0,
            acc: 0.0,
            ori: 0.0,
        }
    }

    fn validate(&self) -> Result<(), OptimizerError> {
        if [self.w3d, self.w2d, self.acc, self.ori].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(OptimizerError::InvalidProblem("energy weights must be finite and non-negative".into()))
        }
    }
}

/// Box limits on the Euler angles of each joint and on the translation.
/// A bound with `min == max` pins that parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub min: Vec<Vector3<f64>>,
    pub max: Vec<Vector3<f64>>,
    pub t_min: Vector3<f64>,
    pub t_max: Vector3<f64>,
}

impl JointLimits {
    /// Limits of the skeleton's joint table; joints without an entry (the
    /// root) and the translation are unbounded.
    pub fn from_skeleton(skeleton: &SkeletonConfig) -> Self {
        let (min, max) = skeleton.limits_rad();
        JointLimits {
            min,
            max,
            t_min: Vector3::repeat(f64::NEG_INFINITY),
            t_max: Vector3::repeat(f64::INFINITY),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.min.len()
    }

    /// Lower and upper bound of every parameter in `EulerPose::to_params`
    /// layout.
    pub fn param_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo: Vec<f64> = self.min.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let mut hi: Vec<f64> = self.max.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        lo.extend(self.t_min.iter());
        hi.extend(self.t_max.iter());
        (lo, hi)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let (lo, hi) = self.param_bounds();
        if self.max.len() != self.min.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(OptimizerError::InvalidProblem("joint limits need min <= max".into()));
        }
        Ok(())
    }

    pub fn check(&self, pose: &EulerPose) -> Result<(), OptimizerError> {
        for (j, a) in pose.angles.iter().enumerate() {
            for k in 0..3 {
                let (lo, hi) = (self.min[j][k], self.max[j][k]);
                if !(a[k] >= lo && a[k] <= hi) {
                    return Err(OptimizerError::LimitViolation {
                        joint: j,
                        axis: k,
                        value: a[k],
                        min: lo,
                        max: hi,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Componentwise clamp of the joint angles (and translation) into the limits.
pub fn clamp_pose(pose: &EulerPose, limits: &JointLimits) -> EulerPose {
    let mut out = pose.clone();
    for (j, a) in out.angles.iter_mut().enumerate() {
        for k in 0..3 {
            a[k] = a[k].clamp(limits.min[j][k], limits.max[j][k]);
        }
    }
    for k in 0..3 {
        out.t[k] = out.t[k].clamp(limits.t_min[k], limits.t_max[k]);
    }
    out
}

fn clamp_params(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    let p = lo.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(lo[i % p], hi[i % p]);
    }
}

/// Observations of one frame used by the energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    /// Keypoints of the cameras entering the 2D term.
    pub keypoints: Vec<KeypointObservation>,
    /// Calibrated orientations of the input sensors.
    pub imu_orientations: Vec<Matrix3<f64>>,
    /// Calibrated accelerations of the input sensors.
    pub imu_accelerations: Vec<Vector3<f64>>,
    /// Accelerations of the extra sensors estimated from the network motion.
    pub est_accelerations: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementProblem {
    pub skeleton: SkeletonConfig,
    pub cameras: Vec<CameraModel>,
    /// Network motion; refinement starts here.
    pub initial: MotionSequence,
    /// Global joint positions of the network motion per frame.
    pub targets: Vec<Vec<Vector3<f64>>>,
    pub observations: Vec<ObservationFrame>,
    pub input_sensors: Vec<usize>,
    pub extra_sensors: Vec<usize>,
    pub weights: EnergyWeights,
    pub limits: JointLimits,
    /// Window length in frames.
    pub window: usize,
}

/// Window length used when the sequence fits in one window.
pub const DEFAULT_WINDOW: usize = 360;

impl RefinementProblem {
    /// Problem seeded by a network motion. `camera_set` selects the cameras
    /// whose keypoints enter the 2D term; accelerations of `extra_sensors`
    /// are taken from the network motion.
    pub fn from_network(
        skeleton: &SkeletonConfig,
        cameras: &[CameraModel],
        network: &MotionSequence,
        frames: &[FrameSample],
        camera_set: &[usize],
        extra_sensors: &[usize],
        weights: EnergyWeights,
    ) -> Result<Self, OptimizerError> {
        if let Some(c) = camera_set.iter().find(|&&c| c >= cameras.len()) {
            return Err(OptimizerError::InvalidProblem(format!("unknown camera {c}")));
        }
        if network.frames.len() != frames.len() {
            return Err(OptimizerError::DimensionMismatch {
                expected: frames.len(),
                found: network.frames.len(),
            });
        }
        let fks = network
            .frames
            .iter()
            .map(|p| forward_kinematics(skeleton, p))
            .collect::<Result<Vec<_>, _>>()?;
        let st = network.sampling_time();
        let est: Vec<Vec<Vector3<f64>>> = extra_sensors
            .iter()
            .map(|&b| {
                let traj: Vec<Vector3<f64>> = fks.iter().map(|fk| fk.bone_midpoint(skeleton, b)).collect();
                sensor_accelerations(&traj, st)
            })
            .collect();
        let mut observations = Vec::with_capacity(frames.len());
        for (t, f) in frames.iter().enumerate() {
            let imus = f.input_imus(skeleton)?;
            observations.push(ObservationFrame {
                keypoints: f.keypoints.iter().filter(|k| camera_set.contains(&k.camera)).cloned().collect(),
                imu_orientations: imus.iter().map(|s| s.orientation).collect(),
                imu_accelerations: imus.iter().map(|s| s.acceleration).collect(),
                est_accelerations: est.iter().map(|a| a[t]).collect(),
            });
        }
        Ok(RefinementProblem {
            skeleton: skeleton.clone(),
            cameras: cameras.to_vec(),
            initial: network.clone(),
            targets: fks.into_iter().map(|fk| fk.joint_positions).collect(),
            observations,
            input_sensors: skeleton.imu_map.clone(),
            extra_sensors: extra_sensors.to_vec(),
            weights,
            limits: JointLimits::from_skeleton(skeleton),
            window: DEFAULT_WINDOW,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.initial.frames.len()
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let n = self.num_frames();
        self.weights.validate()?;
        self.limits.validate()?;
        let nj = self.skeleton.num_joints();
        if self.limits.num_joints() != nj {
            return Err(OptimizerError::DimensionMismatch {
                expected: nj,
                found: self.limits.num_joints(),
            });
        }
        for (len, what) in [(self.targets.len(), "targets"), (self.observations.len(), "observations")] {
            if len != n {
                return Err(OptimizerError::InvalidProblem(format!("{what} has {len} frames, motion has {n}")));
            }
        }
        if self.window < 3 {
            return Err(OptimizerError::InvalidProblem("window must be at least 3 frames".into()));
        }
        for o in &self.observations {
            if o.imu_orientations.len() != self.input_sensors.len()
                || o.imu_accelerations.len() != self.input_sensors.len()
                || o.est_accelerations.len() != self.extra_sensors.len()
            {
                return Err(OptimizerError::InvalidProblem("sensor streams disagree with the sensor lists".into()));
            }
            for k in &o.keypoints {
                if k.camera >= self.cameras.len() {
                    return Err(OptimizerError::InvalidProblem(format!("unknown camera {}", k.camera)));
                }
            }
        }
        for t in &self.targets {
            if t.len() != nj {
                return Err(OptimizerError::DimensionMismatch { expected: nj, found: t.len() });
            }
        }
        for b in self.input_sensors.iter().chain(&self.extra_sensors) {
            if *b == 0 || *b >= nj {
                return Err(OptimizerError::InvalidProblem(format!("sensor bone {b} is not a bone")));
            }
        }
        Ok(())
    }

    fn sampling_time(&self) -> f64 {
        self.initial.sampling_time()
    }

    fn num_sensors(&self) -> usize {
        self.input_sensors.len() + self.extra_sensors.len()
    }

    fn sensor_bones(&self) -> impl Iterator<Item = usize> + '_ {
        self.input_sensors.iter().chain(&self.extra_sensors).copied()
    }
}

/// Energy value and its four terms (weighted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub e3d: f64,
    pub e2d: f64,
    pub acc: f64,
    pub ori: f64,
}

/// Number of parameters per frame.
fn frame_params(nj: usize) -> usize {
    3 * nj + 3
}

/// Per-frame residual block: `[3D | 2D | ori]`, plus the sensor positions
/// needed by the acceleration residuals.
struct FrameResiduals {
    res: Vec<f64>,
    sensors: Vec<Vector3<f64>>,
    /// Boundaries of the 3D, 2D and orientation parts.
    split: [usize; 2],
}

fn frame_residuals(p: &RefinementProblem, t: usize, x: &[f64], cams: &[CameraConst]) -> Result<FrameResiduals, OptimizerError> {
    let sk = &p.skeleton;
    let nj = sk.num_joints();
    let rots: Vec<Matrix3<f64>> = (0..nj)
        .map(|j| euler_to_matrix(&Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])))
        .collect();
    let tr = Vector3::new(x[3 * nj], x[3 * nj + 1], x[3 * nj + 2]);
    let fk = forward_kinematics_matrices(sk, &rots, &tr)?;
    let w = &p.weights;
    let obs = &p.observations[t];
    let mut res = Vec::with_capacity(3 * nj + 2 * nj * obs.keypoints.len() + 9 * p.input_sensors.len());
    let s3 = w.w3d.sqrt();
    for (a, b) in fk.joint_positions.iter().zip(&p.targets[t]) {
        res.extend((s3 * (a - b)).iter());
    }
    let e3 = res.len();
    for kp in &obs.keypoints {
        let cam = &cams[kp.camera];
        for (m, &j) in sk.marker_map.iter().enumerate() {
            let s = (w.w2d * kp.sigma[m]).sqrt();
            let q = fk.joint_positions[j];
            let r = &cam.r;
            let xc = [
                r[0] * q.x + r[1] * q.y + r[2] * q.z + cam.t[0],
                r[3] * q.x + r[4] * q.y + r[5] * q.z + cam.t[1],
                r[6] * q.x + r[7] * q.y + r[8] * q.z + cam.t[2],
            ];
            if xc[2] > 1e-6 {
                let u = cam.fx * xc[0] / xc[2] + cam.cx;
                let v = cam.fy * xc[1] / xc[2] + cam.cy;
                res.push(s * (u - kp.p[m].x));
                res.push(s * (v - kp.p[m].y));
            } else {
                res.push(s * BEHIND_CAMERA_RESIDUAL);
                res.push(0.0);
            }
        }
    }
    let e2 = res.len();
    let so = w.ori.sqrt();
    for (i, &b) in p.input_sensors.iter().enumerate() {
        let d = fk.bone_orientations[b] - obs.imu_orientations[i];
        res.extend(to_row_major(&(so * d)));
    }
    let sensors = p.sensor_bones().map(|b| fk.bone_midpoint(sk, b)).collect();
    Ok(FrameResiduals {
        res,
        sensors,
        split: [e3, e2],
    })
}

/// Acceleration residual at interior frame `t` from the sensor positions of
/// frames `t - 1`, `t`, `t + 1`.
fn acc_residual(p: &RefinementProblem, t: usize, prev: &[Vector3<f64>], cur: &[Vector3<f64>], next: &[Vector3<f64>]) -> Vec<f64> {
    let st = p.sampling_time();
    let sa = p.weights.acc.sqrt();
    let obs = &p.observations[t];
    let mut out = Vec::with_capacity(3 * p.num_sensors());
    for s in 0..p.num_sensors() {
        let a = (next[s] - 2.0 * cur[s] + prev[s]) / (st * st);
        let m = if s < p.input_sensors.len() {
            obs.imu_accelerations[s]
        } else {
            obs.est_accelerations[s - p.input_sensors.len()]
        };
        out.extend((sa * (a - m)).iter());
    }
    out
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn camera_consts(p: &RefinementProblem) -> Vec<CameraConst> {
    p.cameras.iter().map(camera_const).collect()
}

/// Energy of the frames `range` of a flat parameter vector covering exactly
/// those frames. Acceleration terms use interior frames of the range only.
fn energy_flat(p: &RefinementProblem, start: usize, x: &[f64], cams: &[CameraConst]) -> Result<EnergyBreakdown, OptimizerError> {
    let np = frame_params(p.skeleton.num_joints());
    let n = x.len() / np;
    let mut e = EnergyBreakdown {
        total: 0.0,
        e3d: 0.0,
        e2d: 0.0,
        acc: 0.0,
        ori: 0.0,
    };
    let mut sensors = Vec::with_capacity(n);
    for i in 0..n {
        let fr = frame_residuals(p, start + i, &x[i * np..(i + 1) * np], cams)?;
        e.e3d += sum_sq(&fr.res[..fr.split[0]]);
        e.e2d += sum_sq(&fr.res[fr.split[0]..fr.split[1]]);
        e.ori += sum_sq(&fr.res[fr.split[1]..]);
        sensors.push(fr.sensors);
    }
    for i in 1..n.saturating_sub(1) {
        e.acc += sum_sq(&acc_residual(p, start + i, &sensors[i - 1], &sensors[i], &sensors[i + 1]));
    }
    e.total = e.e3d + e.e2d + e.acc + e.ori;
    Ok(e)
}

fn flatten(m: &EulerMotion) -> Vec<f64> {
    let mut out = Vec::new();
    for f in &m.frames {
        let mut buf = vec![0.0; f.num_params()];
        f.to_params(&mut buf);
        out.extend(buf);
    }
    out
}

/// Energy of a whole motion.
pub fn energy(motion: &EulerMotion, problem: &RefinementProblem) -> Result<EnergyBreakdown, OptimizerError> {
    problem.validate()?;
    if motion.frames.len() != problem.num_frames() {
        return Err(OptimizerError::DimensionMismatch {
            expected: problem.num_frames(),
            found: motion.frames.len(),
        });
    }
    for f in &motion.frames {
        problem.limits.check(f)?;
    }
    energy_flat(problem, 0, &flatten(motion), &camera_consts(problem))
}

/// The energy recorded on a tape, as a function of the flat parameter
/// vector `x` (frames in order, `EulerPose::to_params` layout).
pub fn energy_on_tape(tape: &mut Tape, x: Var, problem: &RefinementProblem) -> Var {
    let sk = &problem.skeleton;
    let nj = sk.num_joints();
    let np = frame_params(nj);
    let n = problem.num_frames();
    let w = problem.weights;
    let mut terms = Vec::new();
    let mut sensors = Vec::with_capacity(n);
    for t in 0..n {
        let rots: Vec<Var> = (0..nj)
            .map(|j| {
                let a = tape.slice(x, np * t + 3 * j, 3);
                tape.euler(a)
            })
            .collect();
        let tr = tape.slice(x, np * t + 3 * nj, 3);
        let (globals, rel) = tape_fk(tape, sk, &rots);
        let glob: Vec<Vec<(Var, usize, f64)>> = (0..3 * nj).map(|i| vec![(rel, i, 1.0), (tr, i % 3, 1.0)]).collect();
        let pos = tape.gather(&glob);
        let target: Vec<f64> = problem.targets[t].iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let tl = tape.leaf(&target);
        let d = tape.sub(pos, tl);
        let e3 = tape.sum_sq(d);
        terms.push(tape.scale(e3, w.w3d));
        let obs = &problem.observations[t];
        let markers: Vec<Vec<(Var, usize, f64)>> = sk
            .marker_map
            .iter()
            .flat_map(|&j| (0..3).map(move |k| vec![(pos, 3 * j + k, 1.0)]))
            .collect();
        let mk = tape.gather(&markers);
        for kp in &obs.keypoints {
            let targets: Vec<[f64; 3]> = (0..sk.num_markers()).map(|m| [kp.p[m].x, kp.p[m].y, kp.sigma[m]]).collect();
            let r = tape.reprojection(mk, None, camera_const(&problem.cameras[kp.camera]), &targets);
            terms.push(tape.scale(r, w.w2d));
        }
        for (i, &b) in problem.input_sensors.iter().enumerate() {
            let pj = sk.parent(b).expect("bone");
            let m = tape.leaf(&to_row_major(&obs.imu_orientations[i]));
            let d = tape.sub(globals[pj], m);
            let e = tape.sum_sq(d);
            terms.push(tape.scale(e, w.ori));
        }
        let sp: Vec<Vec<(Var, usize, f64)>> = problem
            .sensor_bones()
            .flat_map(|b| {
                let pj = sk.parent(b).expect("bone");
                (0..3).map(move |k| vec![(pos, 3 * pj + k, 0.5), (pos, 3 * b + k, 0.5)])
            })
            .collect();
        sensors.push(tape.gather(&sp));
    }
    let st = problem.sampling_time();
    for t in 1..n.saturating_sub(1) {
        let obs = &problem.observations[t];
        let m: Vec<f64> = obs
            .imu_accelerations
            .iter()
            .chain(&obs.est_accelerations)
            .flat_map(|v| [v.x, v.y, v.z])
            .collect();
        let two = tape.scale(sensors[t], 2.0);
        let a = tape.sub(sensors[t + 1], two);
        let a = tape.add(a, sensors[t - 1]);
        let a = tape.scale(a, 1.0 / (st * st));
        let ml = tape.leaf(&m);
        let r = tape.sub(a, ml);
        let e = tape.sum_sq(r);
        terms.push(tape.scale(e, w.acc));
    }
    tape.add_all(&terms)
}

/// Forward-difference step for the Jacobian (radians or meters).
pub const JACOBIAN_STEP: f64 = 1e-6;
pub const LM_ITERATIONS: usize = 4;
pub const INITIAL_DAMPING: f64 = 1e-3;
pub const MAX_DAMPING: f64 = 1e6;
/// Initial energies below this are returned untouched.
pub const ZERO_ENERGY: f64 = 1e-18;

/// Outcome of one window's iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub start: usize,
    pub len: usize,
    /// Energy before the first iteration and after each iteration.
    pub energies: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    /// Iterations abandoned because the damping exceeded its maximum.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub motion: MotionSequence,
    /// Refined parameters; `motion` is their 6D form.
    pub euler: EulerMotion,
    pub trace: Vec<WindowTrace>,
}

/// Window start frames: stride `w/2`, the last window ending on the last
/// frame.
fn window_starts(n: usize, w: usize) -> Vec<usize> {
    if n <= w {
        return vec![0];
    }
    let step = (w / 2).max(1);
    let mut s = Vec::new();
    let mut k = 0;
    while k + w < n {
        s.push(k);
        k += step;
    }
    s.push(n - w);
    s
}

/// Jacobian blocks of one window: per frame the dense block of its own
/// residuals and the derivative of its sensor positions.
struct Linearisation {
    frame_res: Vec<Vec<f64>>,
    frame_jac: Vec<Vec<f64>>,
    sensors: Vec<Vec<Vector3<f64>>>,
    sensor_jac: Vec<Vec<f64>>,
}

fn linearise(
    p: &RefinementProblem,
    start: usize,
    x: &[f64],
    active: &[bool],
    cams: &[CameraConst],
) -> Result<Linearisation, OptimizerError> {
    let np = frame_params(p.skeleton.num_joints());
    let n = x.len() / np;
    let ns3 = 3 * p.num_sensors();
    let mut lin = Linearisation {
        frame_res: Vec::with_capacity(n),
        frame_jac: Vec::with_capacity(n),
        sensors: Vec::with_capacity(n),
        sensor_jac: Vec::with_capacity(n),
    };
    for i in 0..n {
        let xi = &x[i * np..(i + 1) * np];
        let base = frame_residuals(p, start + i, xi, cams)?;
        let m = base.res.len();
        // column-major: column k at [k * m .. (k + 1) * m]
        let mut jac = vec![0.0; m * np];
        let mut sjac = vec![0.0; ns3 * np];
        let mut xp = xi.to_vec();
        for k in 0..np {
            if !active[k] {
                continue;
            }
            xp[k] = xi[k] + JACOBIAN_STEP;
            let pert = frame_residuals(p, start + i, &xp, cams)?;
            xp[k] = xi[k];
            for r in 0..m {
                jac[k * m + r] = (pert.res[r] - base.res[r]) / JACOBIAN_STEP;
            }
            for s in 0..p.num_sensors() {
                for c in 0..3 {
                    sjac[k * ns3 + 3 * s + c] = (pert.sensors[s][c] - base.sensors[s][c]) / JACOBIAN_STEP;
                }
            }
        }
        lin.frame_res.push(base.res);
        lin.frame_jac.push(jac);
        lin.sensors.push(base.sensors);
        lin.sensor_jac.push(sjac);
    }
    Ok(lin)
}

/// Normal equations `J^T J` (banded) and `J^T r`.
fn normal_equations(p: &RefinementProblem, start: usize, lin: &Linearisation, np: usize) -> (BandMatrix, Vec<f64>) {
    let n = lin.frame_res.len();
    let kd = if n >= 3 { 3 * np - 1 } else { n * np - 1 };
    let mut a = BandMatrix::zeros(n * np, kd.min(n * np - 1));
    let mut g = vec![0.0; n * np];
    for i in 0..n {
        let m = lin.frame_res[i].len();
        let jac = &lin.frame_jac[i];
        let r = &lin.frame_res[i];
        for c1 in 0..np {
            let col1 = &jac[c1 * m..(c1 + 1) * m];
            g[i * np + c1] += col1.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
            for c2 in 0..=c1 {
                let col2 = &jac[c2 * m..(c2 + 1) * m];
                let v: f64 = col1.iter().zip(col2).map(|(a, b)| a * b).sum();
                if v != 0.0 {
                    a.add_lower(i * np + c1, i * np + c2, v);
                }
            }
        }
    }
    let st = p.sampling_time();
    let ns3 = 3 * p.num_sensors();
    let scale = p.weights.acc.sqrt() / (st * st);
    let coef = [1.0, -2.0, 1.0];
    for t in 1..n.saturating_sub(1) {
        let r = acc_residual(p, start + t, &lin.sensors[t - 1], &lin.sensors[t], &lin.sensors[t + 1]);
        for (u, cu) in coef.iter().enumerate() {
            let fu = t + u - 1;
            let ju = &lin.sensor_jac[fu];
            for c1 in 0..np {
                let col1 = &ju[c1 * ns3..(c1 + 1) * ns3];
                if col1.iter().all(|v| *v == 0.0) {
                    continue;
                }
                g[fu * np + c1] += scale * cu * col1.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
                for (v, cv) in coef.iter().enumerate() {
                    let fv = t + v - 1;
                    if fv > fu {
                        continue;
                    }
                    let jv = &lin.sensor_jac[fv];
                    let top = if fv == fu { c1 + 1 } else { np };
                    for c2 in 0..top {
                        let col2 = &jv[c2 * ns3..(c2 + 1) * ns3];
                        let d: f64 = col1.iter().zip(col2).map(|(a, b)| a * b).sum();
                        if d != 0.0 {
                            a.add_lower(fu * np + c1, fv * np + c2, scale * scale * cu * cv * d);
                        }
                    }
                }
            }
        }
    }
    (a, g)
}

fn refine_window(
    p: &RefinementProblem,
    start: usize,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    cams: &[CameraConst],
) -> Result<(Vec<f64>, WindowTrace), OptimizerError> {
    let np = lo.len();
    let active: Vec<bool> = lo.iter().zip(hi).map(|(a, b)| a < b).collect();
    let mut x = x0.to_vec();
    clamp_params(&mut x, lo, hi);
    let mut e = energy_flat(p, start, &x, cams)?.total;
    let mut trace = WindowTrace {
        start,
        len: x.len() / np,
        energies: vec![e],
        accepted: 0,
        rejected: 0,
        skipped: 0,
    };
    if !(e >= ZERO_ENERGY) {
        trace.energies.extend(std::iter::repeat_n(e, LM_ITERATIONS));
        return Ok((x, trace));
    }
    let mut lambda = INITIAL_DAMPING;
    for _ in 0..LM_ITERATIONS {
        let lin = linearise(p, start, &x, &active, cams)?;
        let (a, g) = normal_equations(p, start, &lin, np);
        let mut stepped = false;
        while lambda <= MAX_DAMPING {
            let mut damped = a.clone();
            damped.add_diagonal(lambda);
            let Some(ch) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let delta = ch.solve(&neg);
            let mut cand: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            clamp_params(&mut cand, lo, hi);
            let ec = energy_flat(p, start, &cand, cams)?.total;
            if ec < e {
                x = cand;
                e = ec;
                lambda = (lambda / 10.0).max(f64::MIN_POSITIVE);
                trace.accepted += 1;
                stepped = true;
                break;
            }
            trace.rejected += 1;
            lambda *= 10.0;
        }
        if !stepped {
            trace.skipped += 1;
            lambda = MAX_DAMPING;
        }
        trace.energies.push(e);
    }
    Ok((x, trace))
}

/// Refines the problem's initial motion window by window and blends the
/// overlaps.
pub fn refine(problem: &RefinementProblem) -> Result<RefineResult, OptimizerError> {
    problem.validate()?;
    let n = problem.num_frames();
    if n == 0 {
        return Ok(RefineResult {
            motion: problem.initial.clone(),
            euler: EulerMotion {
                fps: problem.initial.fps,
                frames: Vec::new(),
            },
            trace: Vec::new(),
        });
    }
    let nj = problem.skeleton.num_joints();
    let np = frame_params(nj);
    let (euler, _) = motion_to_euler(&problem.initial)?;
    let x0 = flatten(&euler);
    let (lo, hi) = problem.limits.param_bounds();
    let cams = camera_consts(problem);

    let mut clamped = x0.clone();
    clamp_params(&mut clamped, &lo, &hi);
    let e0 = energy_flat(problem, 0, &clamped, &cams)?.total;
    if e0 < ZERO_ENERGY {
        return Ok(RefineResult {
            motion: problem.initial.clone(),
            euler: EulerMotion {
                fps: problem.initial.fps,
                frames: clamped.chunks(np).map(|c| EulerPose::from_params(c, nj)).collect(),
            },
            trace: vec![WindowTrace {
                start: 0,
                len: n,
                energies: vec![e0; LM_ITERATIONS + 1],
                accepted: 0,
                rejected: 0,
                skipped: 0,
            }],
        });
    }

    let w = problem.window.min(n);
    let starts = window_starts(n, w);
    let mut results = Vec::with_capacity(starts.len());
    for &s in &starts {
        let (x, tr) = refine_window(problem, s, &x0[s * np..(s + w) * np], &lo, &hi, &cams)?;
        results.push((s, x, tr));
    }

    let poses_of = |x: &[f64]| -> Vec<EulerPose> { x.chunks(np).map(|c| EulerPose::from_params(c, nj)).collect() };
    let mut out: Vec<Option<EulerPose>> = vec![None; n];
    let mut prev_end = 0;
    for (wi, (s, x, _)) in results.iter().enumerate() {
        for (i, pose) in poses_of(x).into_iter().enumerate() {
            let f = s + i;
            match (&out[f], wi > 0 && f < prev_end) {
                (Some(old), true) => {
                    let overlap = prev_end - s;
                    let wgt = (i + 1) as f64 / (overlap + 1) as f64;
                    out[f] = Some(clamp_pose(&blend_poses(old, &pose, wgt)?, &problem.limits));
                }
                _ => out[f] = Some(pose),
            }
        }
        prev_end = s + w;
    }
    let euler = EulerMotion {
        fps: problem.initial.fps,
        frames: out.into_iter().map(|p| p.expect("windows cover the sequence")).collect(),
    };
    Ok(RefineResult {
        motion: euler_to_motion(&euler),
        euler,
        trace: results.into_iter().map(|(_, _, t)| t).collect(),
    })
}

/// Slerp of the joint rotations and lerp of the translation. Angles are
/// taken on the Euler branch nearest to the linear blend of the inputs.
fn blend_poses(a: &EulerPose, b: &EulerPose, w: f64) -> Result<EulerPose, OptimizerError> {
    let mut angles = Vec::with_capacity(a.angles.len());
    for (x, y) in a.angles.iter().zip(&b.angles) {
        let r = slerp(&euler_to_matrix(x), &euler_to_matrix(y), w);
        let reference = x * (1.0 - w) + y * w;
        let d = matrix_to_euler(&r)?.angles;
        let alt = Vector3::new(d.x + PI, PI - d.y, d.z + PI);
        let near = |v: Vector3<f64>| v.zip_map(&reference, |v, r| v + TAU * ((r - v) / TAU).round());
        let (c0, c1) = (near(d), near(alt));
        angles.push(if (c0 - reference).norm() <= (c1 - reference).norm() { c0 } else { c1 });
    }
    Ok(EulerPose {
        angles,
        t: a.t * (1.0 - w) + b.t * w,
    })
}

/// Euler form of a motion with every frame clamped into the limits.
pub fn clamp_motion(motion: &MotionSequence, limits: &JointLimits) -> Result<EulerMotion, OptimizerError> {
    let (e, _) = motion_to_euler(motion)?;
    Ok(EulerMotion {
        fps: e.fps,
        frames: e.frames.iter().map(|f| clamp_pose(f, limits)).collect(),
    })
}

#[cfg(test)]
mod tests;
