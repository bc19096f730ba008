use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gru::{GruBlock, GruHidden};
use super::losses::{tape_fk, IkPrediction};
use super::tape::{ParamId, ParamSet, Tape, Var};
use super::InferenceError;
use crate::kinematics::{matrix_to_rotation6d, MotionSequence, PoseFrame, SkeletonConfig};
use crate::synth::{assemble_input, input_dim, FrameSample, Rig};

/// Spread assumed for joint-position features when standardising block
/// inputs (meters).
pub const POSITION_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub hidden: usize,
    pub dropout: f64,
    /// Output bias of the root tracker.
    pub initial_translation: [f64; 3],
    /// Output bias of the IK solver for the root joint (6D); other joints
    /// start at the identity.
    pub initial_root_6d: [f64; 6],
}

impl StackConfig {
    pub fn with_hidden(hidden: usize) -> Self {
        StackConfig {
            hidden,
            dropout: 0.5,
            initial_translation: [0.0, 0.0, 3.0],
            initial_root_6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// Output biases start at an upright actor standing on the stage origin
    /// of `rig`.
    pub fn for_rig(hidden: usize, rig: &Rig) -> Result<Self, InferenceError> {
        let t = rig.stage_point(&Vector3::new(0.0, 0.0, STANDING_PELVIS_HEIGHT));
        Ok(StackConfig {
            initial_translation: [t.x, t.y, t.z],
            initial_root_6d: matrix_to_rotation6d(&rig.stage_orientation(&Matrix3::identity()))?.0,
            ..Self::with_hidden(hidden)
        })
    }
}

/// Pelvis height of the default humanoid standing upright, in meters.
pub const STANDING_PELVIS_HEIGHT: f64 = 0.96;

/// How far down the hierarchy a forward pass goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Depth {
    Limb,
    Body,
    Full,
}

/// Limb tracker, body tracker, IK solver and root tracker with their
/// shared parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerStack {
    pub skeleton: SkeletonConfig,
    /// Camera whose keypoints form the per-frame input.
    pub inference_camera: usize,
    pub config: StackConfig,
    pub params: ParamSet,
    pub limb: GruBlock,
    pub body: GruBlock,
    pub ik: GruBlock,
    pub root: GruBlock,
}

/// Hidden states of the four blocks on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StackState(pub [GruHidden; 4]);

/// Hidden states detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StackHidden(pub Vec<[Vec<f64>; 2]>);

#[derive(Debug, Clone)]
pub struct ChunkOutput {
    pub limb: Vec<Var>,
    pub body: Vec<Var>,
    pub theta: Vec<Var>,
    pub ik: Option<IkPrediction>,
}

impl TrackerStack {
    pub fn new(skeleton: &SkeletonConfig, inference_camera: usize, config: StackConfig, seed: u64) -> Result<Self, InferenceError> {
        skeleton.validate()?;
        if config.hidden == 0 {
            return Err(InferenceError::InvalidInput("hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(InferenceError::InvalidInput("dropout must lie in [0, 1)".into()));
        }
        let d = input_dim(skeleton);
        let nj = skeleton.num_joints();
        let nl = 3 * skeleton.limb_endpoints.len();
        let nb = 3 * skeleton.body_endpoints.len();
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let limb = GruBlock::new(&mut params, "limb", d, h, nl, config.dropout, &mut rng);
        let body = GruBlock::new(&mut params, "body", d + nl, h, nb, config.dropout, &mut rng);
        let ik = GruBlock::new(&mut params, "ik", d + 3 * nj, h, 6 * nj, config.dropout, &mut rng);
        let root = GruBlock::new(&mut params, "root", d + 3 * nj, h, 3, config.dropout, &mut rng);
        let mut bias = Vec::with_capacity(6 * nj);
        bias.extend_from_slice(&config.initial_root_6d);
        for _ in 1..nj {
            bias.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
        ik.set_output_bias(&mut params, &bias);
        root.set_output_bias(&mut params, &config.initial_translation);
        for (blk, extra) in [(&body, nl), (&ik, 3 * nj), (&root, 3 * nj)] {
            let mut scale = vec![1.0; d];
            scale.extend(std::iter::repeat_n(1.0 / POSITION_SCALE, extra));
            blk.set_normalizer(&mut params, &vec![0.0; d + extra], &scale);
        }
        Ok(TrackerStack {
            skeleton: skeleton.clone(),
            inference_camera,
            config,
            params,
            limb,
            body,
            ik,
            root,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.limb.input_dim
    }

    pub fn blocks(&self) -> [&GruBlock; 4] {
        [&self.limb, &self.body, &self.ik, &self.root]
    }

    /// Fits the normalizers of the shared per-frame input part. The
    /// appended position features keep their fixed scale.
    pub fn fit_input_normalizer<'a>(&mut self, inputs: impl IntoIterator<Item = &'a [f64]> + Clone) {
        let d = self.input_dim();
        self.limb.fit_normalizer(&mut self.params, inputs);
        let mean = self.params.data(self.limb.norm_mean).to_vec();
        let scale = self.params.data(self.limb.norm_scale).to_vec();
        for blk in [&self.body, &self.ik, &self.root] {
            self.params.data_mut(blk.norm_mean)[..d].copy_from_slice(&mean);
            self.params.data_mut(blk.norm_scale)[..d].copy_from_slice(&scale);
        }
    }

    /// Zeroes every trainable tensor except the output biases.
    pub fn zero_weights(&mut self) {
        let keep: Vec<ParamId> = self.blocks().iter().map(|b| b.b_out).collect();
        for id in self.trainable(Depth::Full) {
            if !keep.contains(&id) {
                self.params.data_mut(id).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Trainable tensors of the blocks used up to `depth`.
    pub fn trainable(&self, depth: Depth) -> Vec<ParamId> {
        let mut v = self.limb.trainable();
        if depth >= Depth::Body {
            v.extend(self.body.trainable());
        }
        if depth >= Depth::Full {
            v.extend(self.ik.trainable());
            v.extend(self.root.trainable());
        }
        v
    }

    pub fn zero_hidden(&self) -> StackHidden {
        StackHidden(self.blocks().iter().map(|b| [vec![0.0; b.hidden], vec![0.0; b.hidden]]).collect())
    }

    fn state_on(&self, tape: &mut Tape, hidden: &StackHidden) -> StackState {
        let b = self.blocks();
        StackState([
            b[0].state_from(tape, &hidden.0[0]),
            b[1].state_from(tape, &hidden.0[1]),
            b[2].state_from(tape, &hidden.0[2]),
            b[3].state_from(tape, &hidden.0[3]),
        ])
    }

    fn endpoint_gather(&self, limb: Var, body: Var) -> Vec<Vec<(Var, usize, f64)>> {
        let sk = &self.skeleton;
        (0..sk.num_joints())
            .flat_map(|j| {
                let src = if let Some(i) = sk.limb_endpoints.iter().position(|&e| e == j) {
                    Some((limb, i))
                } else {
                    sk.body_endpoints.iter().position(|&e| e == j).map(|i| (body, i))
                };
                (0..3).map(move |k| src.map(|(v, i)| vec![(v, 3 * i + k, 1.0)]).unwrap_or_default())
            })
            .collect()
    }

    /// One frame through the hierarchy. Returns `(limb, body, theta, fk
    /// rotations, fk joints, translation)`; entries beyond `depth` are
    /// `None`.
    #[allow(clippy::type_complexity)]
    pub fn step(
        &self,
        tape: &mut Tape,
        x: Var,
        state: StackState,
        depth: Depth,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> (StepVars, StackState) {
        let mut rng = dropout;
        let mut mask = |blk: &GruBlock| rng.as_deref_mut().and_then(|r| blk.dropout_mask(r));
        let s = state.0;
        let ml = mask(&self.limb);
        let (limb, sl) = self.limb.step(tape, &self.params, &[x], s[0], ml.as_deref());
        let mut out = StepVars {
            limb,
            body: None,
            theta: None,
            locals: None,
            joints: None,
            trans: None,
        };
        let mut ns = StackState([sl, s[1], s[2], s[3]]);
        if depth == Depth::Limb {
            return (out, ns);
        }
        let mb = mask(&self.body);
        let (body, sb) = self.body.step(tape, &self.params, &[x, limb], s[1], mb.as_deref());
        out.body = Some(body);
        ns.0[1] = sb;
        if depth == Depth::Body {
            return (out, ns);
        }
        let ends = self.endpoint_gather(limb, body);
        let ends = tape.gather(&ends);
        let mi = mask(&self.ik);
        let (theta, si) = self.ik.step(tape, &self.params, &[x, ends], s[2], mi.as_deref());
        let nj = self.skeleton.num_joints();
        let locals: Vec<Var> = (0..nj)
            .map(|j| {
                let sl = tape.slice(theta, 6 * j, 6);
                tape.gram_schmidt(sl)
            })
            .collect();
        let (globals, joints) = tape_fk(tape, &self.skeleton, &locals);
        let mr = mask(&self.root);
        let (trans, sr) = self.root.step(tape, &self.params, &[x, joints], s[3], mr.as_deref());
        ns.0[2] = si;
        ns.0[3] = sr;
        out.theta = Some(theta);
        out.locals = Some((locals, globals));
        out.joints = Some(joints);
        out.trans = Some(trans);
        (out, ns)
    }

    /// Forward pass over a chunk starting from zero hidden state.
    pub fn forward_chunk(&self, tape: &mut Tape, inputs: &[Vec<f64>], depth: Depth, mut dropout: Option<&mut ChaCha8Rng>) -> ChunkOutput {
        let mut state = self.state_on(tape, &self.zero_hidden());
        let mut limb = Vec::with_capacity(inputs.len());
        let mut body = Vec::new();
        let mut theta = Vec::new();
        let (mut locals, mut globals, mut joints, mut trans) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for x in inputs {
            let xv = tape.leaf(x);
            let (o, s) = self.step(tape, xv, state, depth, dropout.as_deref_mut());
            state = s;
            limb.push(o.limb);
            if let Some(b) = o.body {
                body.push(b);
            }
            if let (Some(th), Some((l, g)), Some(j), Some(t)) = (o.theta, o.locals, o.joints, o.trans) {
                theta.push(th);
                locals.push(l);
                globals.push(g);
                joints.push(j);
                trans.push(t);
            }
        }
        let ik = (depth == Depth::Full).then_some(IkPrediction {
            locals,
            globals,
            joints,
            trans,
        });
        ChunkOutput { limb, body, theta, ik }
    }

    /// Per-frame network inputs of a sequence.
    pub fn assemble_inputs(&self, frames: &[FrameSample]) -> Result<Vec<Vec<f64>>, InferenceError> {
        let d = self.input_dim();
        frames
            .iter()
            .map(|f| {
                let x = assemble_input(f, &self.skeleton, self.inference_camera)?;
                if x.len() != d {
                    return Err(InferenceError::DimensionMismatch { expected: d, found: x.len() });
                }
                Ok(x)
            })
            .collect()
    }
}

/// Tape handles produced by [`TrackerStack::step`].
#[derive(Debug, Clone)]
pub struct StepVars {
    pub limb: Var,
    pub body: Option<Var>,
    pub theta: Option<Var>,
    /// Local and global rotations of every joint.
    pub locals: Option<(Vec<Var>, Vec<Var>)>,
    pub joints: Option<Var>,
    pub trans: Option<Var>,
}

/// Everything the stack produces for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub motion: MotionSequence,
    /// Limb then body endpoint positions per frame (root-relative).
    pub endpoints: Vec<Vec<Vector3<f64>>>,
}

/// Causal pass over a sequence with the hidden state carried across frames
/// and dropout disabled.
pub fn infer_sequence(stack: &TrackerStack, frames: &[FrameSample]) -> Result<MotionSequence, InferenceError> {
    Ok(infer_sequence_detailed(stack, frames)?.motion)
}

pub fn infer_sequence_detailed(stack: &TrackerStack, frames: &[FrameSample]) -> Result<SequencePrediction, InferenceError> {
    let inputs = stack.assemble_inputs(frames)?;
    let nj = stack.skeleton.num_joints();
    let mut tape = Tape::new();
    let mut hidden = stack.zero_hidden();
    let mut poses = Vec::with_capacity(frames.len());
    let mut endpoints = Vec::with_capacity(frames.len());
    for x in &inputs {
        tape.clear();
        let state = stack.state_on(&mut tape, &hidden);
        let xv = tape.leaf(x);
        let (o, s) = stack.step(&mut tape, xv, state, Depth::Full, None);
        hidden = StackHidden(s.0.iter().map(|h| [tape.value(h.0[0]).to_vec(), tape.value(h.0[1]).to_vec()]).collect());
        let (locals, _) = o.locals.expect("full depth");
        let mut theta = Vec::with_capacity(nj);
        for l in &locals {
            let m = Matrix3::from_row_slice(tape.value(*l));
            theta.push(matrix_to_rotation6d(&m)?);
        }
        let t = tape.value(o.trans.expect("full depth"));
        let pose = PoseFrame {
            theta_6d: theta,
            t: Vector3::new(t[0], t[1], t[2]),
        };
        if !pose.is_finite() {
            return Err(InferenceError::NumericalOverflow);
        }
        poses.push(pose);
        let mut ep: Vec<Vector3<f64>> = Vec::new();
        for v in [o.limb, o.body.expect("full depth")] {
            ep.extend(tape.value(v).chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])));
        }
        endpoints.push(ep);
    }
    let fps = frames.first().map(|f| 1.0 / f.sampling_time).unwrap_or(0.0);
    Ok(SequencePrediction {
        motion: MotionSequence { fps, frames: poses },
        endpoints,
    })
}
