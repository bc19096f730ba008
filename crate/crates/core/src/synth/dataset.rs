use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::Rig;
use super::motion::{generate_motion, MotionKind};
use super::render::{render_observations, FrameSample, NoiseSpec};
use super::SynthError;
use crate::calibration::CalibrationResult;
use crate::io;
use crate::kinematics::{MotionSequence, SkeletonConfig};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// What to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    pub fps: f64,
    /// Motion kinds, cycled over the sequences.
    pub kinds: Vec<MotionKind>,
    pub noise: NoiseSpec,
    /// Host bones of all simulated IMUs.
    pub sensors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub kind: MotionKind,
    pub seed: u64,
    pub frames: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub skeleton: SkeletonConfig,
    pub rig: Rig,
    /// Ground-truth calibration the raw IMU readings were generated with.
    pub calibration: CalibrationResult,
    pub fps: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    /// Camera whose keypoints feed the network.
    pub inference_camera: usize,
    pub sensors: Vec<usize>,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub kind: MotionKind,
    pub seed: u64,
    pub frames: Vec<FrameSample>,
}

impl SequenceRecord {
    pub fn fps(&self) -> f64 {
        self.frames.first().map(|f| 1.0 / f.sampling_time).unwrap_or(0.0)
    }

    pub fn ground_truth(&self) -> MotionSequence {
        MotionSequence {
            fps: self.fps(),
            frames: self.frames.iter().map(|f| f.pose.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        io::write_json(&dir.join("manifest.json"), &self.manifest)?;
        for (entry, seq) in self.manifest.sequences.iter().zip(&self.sequences) {
            io::write_jsonl(&dir.join(&entry.file), &seq.frames)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, SynthError> {
        let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(SynthError::InvalidDataset(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        manifest.skeleton.validate()?;
        let mut sequences = Vec::with_capacity(manifest.sequences.len());
        for e in &manifest.sequences {
            let frames: Vec<FrameSample> = io::read_jsonl(&dir.join(&e.file))?;
            if frames.len() != e.frames {
                return Err(SynthError::InvalidDataset(format!(
                    "{} has {} frames, manifest says {}",
                    e.file,
                    frames.len(),
                    e.frames
                )));
            }
            sequences.push(SequenceRecord {
                name: e.name.clone(),
                kind: e.kind,
                seed: e.seed,
                frames,
            });
        }
        Ok(Dataset { manifest, sequences })
    }

    /// Same dataset with only the sensors on `keep` (used to strip
    /// supervision-only IMUs from a test split).
    pub fn retain_sensors(&mut self, keep: &[usize]) {
        self.manifest.sensors.retain(|s| keep.contains(s));
        for seq in &mut self.sequences {
            for f in &mut seq.frames {
                f.imus.retain(|i| keep.contains(&i.sensor()));
            }
        }
    }
}

/// Generates motions on the rig's stage and renders them into a dataset.
/// Sequence seeds are drawn from `seed`, so the whole dataset is a function
/// of its arguments.
pub fn simulate_dataset(
    spec: &DatasetSpec,
    skeleton: &SkeletonConfig,
    rig: &Rig,
    calibration: &CalibrationResult,
    seed: u64,
) -> Result<Dataset, SynthError> {
    if spec.kinds.is_empty() {
        return Err(SynthError::InvalidDataset("no motion kinds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(spec.sequences);
    let mut sequences = Vec::with_capacity(spec.sequences);
    for i in 0..spec.sequences {
        let kind = spec.kinds[i % spec.kinds.len()];
        let motion_seed: u64 = rng.random();
        let noise_seed: u64 = rng.random();
        let stage = generate_motion(skeleton, kind, spec.frames, spec.fps, motion_seed)?;
        let motion = rig.stage_motion(&stage)?;
        let frames = render_observations(&motion, skeleton, &rig.cameras, calibration, &spec.sensors, &spec.noise, noise_seed)?;
        let name = format!("seq{:03}_{}", i, kind);
        entries.push(SequenceEntry {
            name: name.clone(),
            kind,
            seed: motion_seed,
            frames: frames.len(),
            file: format!("{}.jsonl", name),
        });
        sequences.push(SequenceRecord {
            name,
            kind,
            seed: motion_seed,
            frames,
        });
    }
    let mut sensors = spec.sensors.clone();
    sensors.sort_unstable();
    sensors.dedup();
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            skeleton: skeleton.clone(),
            rig: rig.clone(),
            calibration: calibration.clone(),
            fps: spec.fps,
            seed,
            noise: spec.noise.clone(),
            inference_camera: 0,
            sensors,
            sequences: entries,
        },
        sequences,
    })
}
