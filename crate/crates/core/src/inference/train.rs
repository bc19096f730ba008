use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{loss_body, loss_ik, loss_limb, loss_prior, loss_trans, LossWeights};
use super::stack::{Depth, TrackerStack};
use super::tape::{ParamGrads, ParamId, ParamSet, Tape, Var};
use super::InferenceError;
use crate::synth::{Dataset, FrameSample};

/// Training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub limb_epochs: usize,
    pub body_epochs: usize,
    pub pretrain_epochs: usize,
    pub full_epochs: usize,
    pub learning_rate: f64,
    /// Number of final full-phase epochs run at `learning_rate * decay_rate`.
    pub decay_epochs: usize,
    pub decay_rate: f64,
    /// Chunks per optimizer step.
    pub batch_size: usize,
    /// Frames per training chunk; each chunk starts from zero hidden state.
    pub chunk_len: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::desk()
    }
}

impl Schedule {
    /// Full-scale schedule.
    pub fn full_scale() -> Self {
        Schedule {
            limb_epochs: 20,
            body_epochs: 20,
            pretrain_epochs: 10,
            full_epochs: 100,
            learning_rate: 1e-4,
            decay_epochs: 50,
            decay_rate: 0.1,
            batch_size: 16,
            chunk_len: 360,
        }
    }

    /// Scaled-down schedule for single-core runs.
    pub fn desk() -> Self {
        Schedule {
            limb_epochs: 5,
            body_epochs: 5,
            pretrain_epochs: 3,
            full_epochs: 20,
            learning_rate: 2e-3,
            decay_epochs: 10,
            decay_rate: 0.1,
            batch_size: 2,
            chunk_len: 40,
        }
    }

    pub fn none() -> Self {
        Schedule {
            limb_epochs: 0,
            body_epochs: 0,
            pretrain_epochs: 0,
            full_epochs: 0,
            ..Self::desk()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.limb_epochs + self.body_epochs + self.pretrain_epochs + self.full_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Limb,
    Body,
    Pretrain,
    Full,
}

/// Mean loss per frame for each epoch of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurve {
    pub phase: Phase,
    /// Global index of the phase's first epoch.
    pub start_epoch: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<PhaseCurve>,
    pub steps: usize,
}

/// Adam with bias correction over a subset of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads, ids: &[ParamId], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in ids {
            let g = &grads.grads[id.0];
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.data_mut(*id);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

struct Chunk {
    seq: usize,
    start: usize,
    len: usize,
}

/// Training view of a dataset: precomputed inputs and the supervision set.
pub struct TrainingData<'a> {
    pub dataset: &'a Dataset,
    pub inputs: Vec<Vec<Vec<f64>>>,
    pub sensors: Vec<usize>,
}

impl<'a> TrainingData<'a> {
    pub fn new(stack: &TrackerStack, dataset: &'a Dataset) -> Result<Self, InferenceError> {
        if dataset.manifest.rig.cameras.len() < 2 {
            return Err(InferenceError::InvalidInput("weak supervision needs at least two cameras".into()));
        }
        let inputs = dataset
            .sequences
            .iter()
            .map(|s| stack.assemble_inputs(&s.frames))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TrainingData {
            dataset,
            inputs,
            sensors: dataset.manifest.sensors.clone(),
        })
    }
}

/// Loss of one phase on a chunk of frames.
pub fn phase_loss(
    tape: &mut Tape,
    stack: &TrackerStack,
    phase: Phase,
    inputs: &[Vec<f64>],
    frames: &[FrameSample],
    cameras: &[crate::synth::CameraModel],
    sensors: &[usize],
    weights: &LossWeights,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, InferenceError> {
    let depth = match phase {
        Phase::Limb => Depth::Limb,
        Phase::Body => Depth::Body,
        Phase::Pretrain | Phase::Full => Depth::Full,
    };
    let out = stack.forward_chunk(tape, inputs, depth, dropout);
    let sk = &stack.skeleton;
    let t_ref: Vec<Vector3<f64>> = frames.iter().map(|f| f.pose.t).collect();
    let mut terms = Vec::new();
    if matches!(phase, Phase::Limb | Phase::Body | Phase::Full) {
        terms.push(loss_limb(tape, sk, cameras, &out.limb, &t_ref, frames)?);
    }
    if matches!(phase, Phase::Body | Phase::Full) {
        terms.push(loss_body(tape, sk, cameras, &out.limb, &out.body, &t_ref, frames)?);
    }
    match (phase, &out.ik) {
        (Phase::Pretrain, Some(ik)) => {
            let p = loss_prior(tape, ik, frames)?;
            let t = loss_trans(tape, ik, frames)?;
            terms.push(tape.scale(p, weights.prior));
            terms.push(tape.scale(t, weights.trans));
        }
        (Phase::Full, Some(ik)) => {
            terms.push(loss_ik(tape, sk, cameras, ik, frames, sensors, weights)?.total);
        }
        _ => {}
    }
    Ok(tape.add_all(&terms))
}

fn chunks(data: &TrainingData, len: usize) -> Vec<Chunk> {
    let len = len.max(3);
    let mut out = Vec::new();
    for (seq, s) in data.dataset.sequences.iter().enumerate() {
        let n = s.frames.len();
        let mut start = 0;
        while start + 3 <= n {
            let l = len.min(n - start);
            out.push(Chunk { seq, start, len: l });
            start += len;
        }
    }
    out
}

/// Multi-phase training: limb tracker, then limb and body trackers, then a
/// prior/translation warm-up of the IK solver and root tracker, then every
/// block on the full objective.
///
/// On a non-finite loss or gradient the stack is restored to the state at
/// the start of the failing epoch and [`InferenceError::Divergence`] is
/// returned.
pub fn train_multiphase(
    stack: &mut TrackerStack,
    dataset: &Dataset,
    schedule: &Schedule,
    weights: &LossWeights,
    seed: u64,
) -> Result<TrainReport, InferenceError> {
    weights.validate()?;
    let mut report = TrainReport {
        curves: Vec::new(),
        steps: 0,
    };
    if schedule.total_epochs() == 0 {
        return Ok(report);
    }
    let data = TrainingData::new(stack, dataset)?;
    stack.fit_input_normalizer(data.inputs.iter().flatten().map(|x| x.as_slice()));
    let cameras = &dataset.manifest.rig.cameras;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = chunks(&data, schedule.chunk_len);
    if all.is_empty() {
        return Err(InferenceError::SequenceTooShort(0));
    }
    let phases = [
        (Phase::Limb, schedule.limb_epochs, Depth::Limb),
        (Phase::Body, schedule.body_epochs, Depth::Body),
        (Phase::Pretrain, schedule.pretrain_epochs, Depth::Full),
        (Phase::Full, schedule.full_epochs, Depth::Full),
    ];
    let mut epoch_index = 0;
    let mut tape = Tape::new();
    let mut grads = ParamGrads::zeros(&stack.params);
    for (phase, epochs, depth) in phases {
        if epochs == 0 {
            continue;
        }
        let ids: Vec<ParamId> = match phase {
            Phase::Pretrain => {
                let mut v = stack.ik.trainable();
                v.extend(stack.root.trainable());
                v
            }
            _ => stack.trainable(depth),
        };
        let mut adam = Adam::new(&stack.params);
        let mut curve = PhaseCurve {
            phase,
            start_epoch: epoch_index,
            losses: Vec::with_capacity(epochs),
        };
        for e in 0..epochs {
            let checkpoint = stack.clone();
            let decayed = phase == Phase::Full && e + schedule.decay_epochs >= epochs;
            let lr = schedule.learning_rate * if decayed { schedule.decay_rate } else { 1.0 };
            all.shuffle(&mut rng);
            let mut total = 0.0;
            let mut frames_seen = 0usize;
            for batch in all.chunks(schedule.batch_size.max(1)) {
                grads.clear();
                for c in batch {
                    let seq = &dataset.sequences[c.seq];
                    let frames = &seq.frames[c.start..c.start + c.len];
                    let inputs = &data.inputs[c.seq][c.start..c.start + c.len];
                    tape.clear();
                    let loss = phase_loss(
                        &mut tape,
                        stack,
                        phase,
                        inputs,
                        frames,
                        cameras,
                        &data.sensors,
                        weights,
                        Some(&mut rng),
                    )?;
                    let l = tape.scalar(loss);
                    if !l.is_finite() {
                        *stack = checkpoint;
                        return Err(InferenceError::Divergence { phase, epoch: epoch_index });
                    }
                    total += l;
                    frames_seen += c.len;
                    tape.backward(loss, &stack.params, &mut grads);
                }
                if !grads.is_finite() {
                    *stack = checkpoint;
                    return Err(InferenceError::Divergence { phase, epoch: epoch_index });
                }
                adam.step(&mut stack.params, &grads, &ids, lr);
                report.steps += 1;
            }
            if !stack.params.is_finite() {
                *stack = checkpoint;
                return Err(InferenceError::Divergence { phase, epoch: epoch_index });
            }
            curve.losses.push(total / frames_seen.max(1) as f64);
            epoch_index += 1;
        }
        report.curves.push(curve);
    }
    Ok(report)
}
