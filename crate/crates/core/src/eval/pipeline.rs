//! simulate -> calibrate -> train -> infer -> optimize -> eval.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{InitKind, PipelineConfig};
use super::metrics::{MetricRow, MetricsReport, SequenceMetrics, StageMetrics};
use super::{EvalError, Stage};
use crate::calibration::{calibrate_two_frame, CalibrationObservation, CalibrationResult};
use crate::inference::{
    infer_sequence, load_weights, save_weights, train_multiphase, StackConfig, TrackerStack, TrainReport,
};
use crate::io;
use crate::kinematics::{MotionSequence, SkeletonConfig};
use crate::optimizer::{refine, EnergyWeights, RefineResult, RefinementProblem};
use crate::synth::{random_calibration, simulate_calibration, simulate_dataset, Dataset, DatasetSpec, Rig, SequenceRecord};

/// Seeds of every random stage, drawn in a fixed order from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub calibration_truth: u64,
    pub capture: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub stack: u64,
    pub train: u64,
    pub ablation_stack: u64,
    pub ablation_train: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            calibration_truth: rng.random(),
            capture: rng.random(),
            train_data: rng.random(),
            test_data: rng.random(),
            stack: rng.random(),
            train: rng.random(),
            ablation_stack: rng.random(),
            ablation_train: rng.random(),
        }
    }
}

/// Output of the simulation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub skeleton: SkeletonConfig,
    pub rig: Rig,
    /// Sensors carried by the training data.
    pub supervision: Vec<usize>,
    pub truth: CalibrationResult,
    pub capture: CalibrationObservation,
    pub train: Option<Dataset>,
    /// Test split; only the input sensors are kept.
    pub test: Dataset,
}

impl Simulation {
    pub fn write(&self, out: &Path, datasets: bool) -> Result<(), EvalError> {
        fs::create_dir_all(out)?;
        io::write_json(&out.join("skeleton.json"), &self.skeleton)?;
        io::write_json(&out.join("rig.json"), &self.rig)?;
        io::write_json(&out.join("calibration_truth.json"), &self.truth)?;
        io::write_json(&out.join("calibration_capture.json"), &self.capture)?;
        if datasets {
            if let Some(t) = &self.train {
                t.write(&out.join("train"))?;
            }
            self.test.write(&out.join("test"))?;
        }
        Ok(())
    }
}

/// Builds the skeleton, rig and ground-truth mounting, then simulates the
/// calibration capture and the datasets. A configured test dataset brings
/// its own skeleton and rig.
pub fn simulate_stage(cfg: &PipelineConfig, seeds: &Seeds, with_train: bool) -> Result<Simulation, EvalError> {
    let given_test = match &cfg.paths.dataset {
        Some(p) => Some(Dataset::read(p)?),
        None => None,
    };
    let (skeleton, rig) = match &given_test {
        Some(d) => (d.manifest.skeleton.clone(), d.manifest.rig.clone()),
        None => {
            let skeleton: SkeletonConfig = match &cfg.paths.skeleton {
                Some(p) => io::read_json(p)?,
                None => SkeletonConfig::default_humanoid(),
            };
            let rig = match &cfg.paths.cameras {
                Some(p) => io::read_json(p)?,
                None => cfg.rig.build(),
            };
            (skeleton, rig)
        }
    };
    skeleton.validate()?;
    let camera = cfg.rig.inference_camera;
    if camera >= rig.cameras.len() {
        return Err(EvalError::InvalidConfig(format!("inference camera {camera} not in a {}-camera rig", rig.cameras.len())));
    }
    let mut supervision = cfg.data.supervision_sensors.clone().unwrap_or_else(|| skeleton.bones());
    supervision.extend(&skeleton.imu_map);
    supervision.sort_unstable();
    supervision.dedup();
    let truth = match &cfg.paths.calibration {
        Some(p) => io::read_json(p)?,
        None => random_calibration(&supervision, seeds.calibration_truth),
    };
    let capture = simulate_calibration(&skeleton, &rig, &truth, &supervision, cfg.calibration.noise_deg, seeds.capture)?;
    let spec = |sequences| DatasetSpec {
        sequences,
        frames: cfg.data.frames,
        fps: cfg.data.fps,
        kinds: cfg.data.kinds.clone(),
        noise: cfg.data.noise.clone(),
        sensors: supervision.clone(),
    };
    let train = if with_train {
        let mut d = simulate_dataset(&spec(cfg.data.train_sequences), &skeleton, &rig, &truth, seeds.train_data)?;
        d.manifest.inference_camera = camera;
        Some(d)
    } else {
        None
    };
    let mut test = match given_test {
        Some(d) => d,
        None => simulate_dataset(&spec(cfg.data.test_sequences), &skeleton, &rig, &truth, seeds.test_data)?,
    };
    test.manifest.inference_camera = camera;
    test.retain_sensors(&skeleton.imu_map);
    Ok(Simulation {
        skeleton,
        rig,
        supervision,
        truth,
        capture,
        train,
        test,
    })
}

pub fn calibrate_stage(capture: &CalibrationObservation) -> Result<CalibrationResult, EvalError> {
    Ok(calibrate_two_frame(capture)?)
}

/// Recomputes every calibrated IMU quantity of `dataset` from its raw
/// readings.
pub fn apply_calibration(dataset: &mut Dataset, calibration: &CalibrationResult) -> Result<(), EvalError> {
    for seq in &mut dataset.sequences {
        for f in &mut seq.frames {
            for imu in &mut f.imus {
                imu.recalibrate(calibration)?;
            }
        }
    }
    Ok(())
}

pub fn train_stage(
    cfg: &PipelineConfig,
    skeleton: &SkeletonConfig,
    rig: &Rig,
    train: &Dataset,
    stack_seed: u64,
    train_seed: u64,
) -> Result<(TrackerStack, TrainReport), EvalError> {
    let mut sc = StackConfig::for_rig(cfg.model.hidden, rig)?;
    sc.dropout = cfg.model.dropout;
    let mut stack = TrackerStack::new(skeleton, cfg.rig.inference_camera, sc, stack_seed)?;
    let report = train_multiphase(&mut stack, train, &cfg.schedule, &cfg.loss, train_seed)?;
    Ok((stack, report))
}

/// Inference timing, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub hidden: usize,
    pub frames: usize,
    pub seconds: f64,
    pub frames_per_second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRun {
    pub motions: Vec<MotionSequence>,
    pub throughput: Throughput,
}

pub fn infer_stage(stack: &TrackerStack, test: &Dataset) -> Result<InferenceRun, EvalError> {
    let start = Instant::now();
    let motions = test
        .sequences
        .iter()
        .map(|s| infer_sequence(stack, &s.frames))
        .collect::<Result<Vec<_>, _>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let frames: usize = motions.iter().map(|m| m.frames.len()).sum();
    Ok(InferenceRun {
        motions,
        throughput: Throughput {
            hidden: stack.config.hidden,
            frames,
            seconds,
            frames_per_second: frames as f64 / seconds.max(1e-9),
        },
    })
}

/// Refines one sequence. Sensors of `supervision` that are not inputs of
/// `skeleton` contribute accelerations estimated from `init`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_sequence(
    cfg: &PipelineConfig,
    skeleton: &SkeletonConfig,
    rig: &Rig,
    seq: &SequenceRecord,
    init: &MotionSequence,
    supervision: &[usize],
    weights: EnergyWeights,
) -> Result<RefineResult, EvalError> {
    let cameras = cfg.optimizer.cameras.clone().unwrap_or_else(|| vec![cfg.rig.inference_camera]);
    let extra: Vec<usize> = supervision.iter().copied().filter(|b| !skeleton.imu_map.contains(b)).collect();
    let mut problem = RefinementProblem::from_network(skeleton, &rig.cameras, init, &seq.frames, &cameras, &extra, weights)?;
    problem.window = cfg.optimizer.window;
    Ok(refine(&problem)?)
}

pub fn evaluate_stage(
    name: &str,
    motions: &[MotionSequence],
    test: &Dataset,
    calibration: &CalibrationResult,
    skeleton: &SkeletonConfig,
    thresholds: &[f64],
) -> Result<StageMetrics, EvalError> {
    if motions.len() != test.sequences.len() {
        return Err(EvalError::LengthMismatch {
            pred: motions.len(),
            gt: test.sequences.len(),
        });
    }
    let mut rows = Vec::with_capacity(motions.len());
    for (m, s) in motions.iter().zip(&test.sequences) {
        let metrics = MetricRow::evaluate(m, &s.ground_truth(), &s.frames, calibration, skeleton, thresholds)?;
        rows.push(SequenceMetrics {
            name: s.name.clone(),
            frames: s.frames.len(),
            metrics,
        });
    }
    StageMetrics::from_sequences(name, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub report: MetricsReport,
    pub throughput: Throughput,
    pub train_report: Option<TrainReport>,
}

fn write_motions(dir: &Path, test: &Dataset, motions: &[MotionSequence]) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    for (m, s) in motions.iter().zip(&test.sequences) {
        io::write_json(&dir.join(format!("{}.json", s.name)), m)?;
    }
    Ok(())
}

fn optimize_all(
    cfg: &PipelineConfig,
    skeleton: &SkeletonConfig,
    sim: &Simulation,
    inits: &[MotionSequence],
    weights: EnergyWeights,
    out: Option<&Path>,
) -> Result<Vec<MotionSequence>, EvalError> {
    let mut motions = Vec::with_capacity(inits.len());
    for (init, seq) in inits.iter().zip(&sim.test.sequences) {
        let r = optimize_sequence(cfg, skeleton, &sim.rig, seq, init, &sim.supervision, weights)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            io::write_jsonl(&dir.join(format!("{}.trace.jsonl", seq.name)), &r.trace)?;
        }
        motions.push(r.motion);
    }
    if let Some(dir) = out {
        write_motions(dir, &sim.test, &motions)?;
    }
    Ok(motions)
}

/// Runs every stage, writing artifacts under `out`. The report depends only
/// on the configuration; timings go to `throughput.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutput, EvalError> {
    cfg.validate().map_err(EvalError::at(Stage::Config))?;
    fs::create_dir_all(out).map_err(|e| EvalError::at(Stage::Config)(e.into()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()).map_err(|e| EvalError::at(Stage::Config)(e.into()))?;
    let seeds = Seeds::new(cfg.seed);

    let need_train = cfg.paths.weights.is_none() || cfg.eval.ablations;
    let mut sim = simulate_stage(cfg, &seeds, need_train)
        .and_then(|s| s.write(out, cfg.data.write).map(|_| s))
        .map_err(EvalError::at(Stage::Simulate))?;
    let skeleton = sim.skeleton.clone();

    let calibrate = |sim: &mut Simulation| -> Result<CalibrationResult, EvalError> {
        let c = calibrate_stage(&sim.capture)?;
        io::write_json(&out.join("calibration.json"), &c)?;
        if let Some(t) = &mut sim.train {
            apply_calibration(t, &c)?;
        }
        apply_calibration(&mut sim.test, &c)?;
        Ok(c)
    };
    calibrate(&mut sim).map_err(EvalError::at(Stage::Calibrate))?;

    let (stack, train_report) = (|| -> Result<_, EvalError> {
        let (stack, report) = match &cfg.paths.weights {
            Some(p) => (load_weights(p)?, None),
            None => {
                let train = sim.train.as_ref().expect("training data simulated");
                let (s, r) = train_stage(cfg, &skeleton, &sim.rig, train, seeds.stack, seeds.train)?;
                io::write_json(&out.join("train_report.json"), &r)?;
                (s, Some(r))
            }
        };
        save_weights(&stack, &out.join("weights.bin"))?;
        Ok((stack, report))
    })()
    .map_err(EvalError::at(Stage::Train))?;

    let run = (|| -> Result<_, EvalError> {
        let run = infer_stage(&stack, &sim.test)?;
        write_motions(&out.join("infer"), &sim.test, &run.motions)?;
        io::write_json(&out.join("throughput.json"), &run.throughput)?;
        Ok(run)
    })()
    .map_err(EvalError::at(Stage::Infer))?;

    let truths: Vec<MotionSequence> = sim.test.sequences.iter().map(|s| s.ground_truth()).collect();
    let inits = match cfg.optimizer.init {
        InitKind::Network => &run.motions,
        InitKind::GroundTruth => &truths,
    };
    let mut outputs: Vec<(&str, Vec<MotionSequence>)> = vec![("inference", run.motions.clone())];
    if cfg.optimizer.enabled {
        let m = optimize_all(cfg, &skeleton, &sim, inits, cfg.energy, Some(&out.join("optimized")))
            .map_err(EvalError::at(Stage::Optimize))?;
        outputs.push(("optimized", m));
    }
    if cfg.eval.ablations {
        let no_inertial = EnergyWeights {
            acc: 0.0,
            ori: 0.0,
            ..cfg.energy
        };
        let m = optimize_all(cfg, &skeleton, &sim, inits, no_inertial, None).map_err(EvalError::at(Stage::Optimize))?;
        outputs.push(("optimized_without_inertial", m));

        let two = (|| -> Result<_, EvalError> {
            let sk2 = skeleton.with_imu_map(cfg.eval.ablation_imus.clone())?;
            let train = sim.train.as_ref().expect("training data simulated");
            let (stack2, _) = train_stage(cfg, &sk2, &sim.rig, train, seeds.ablation_stack, seeds.ablation_train)?;
            Ok((sk2, infer_stage(&stack2, &sim.test)?.motions))
        })()
        .map_err(EvalError::at(Stage::Train))?;
        let (sk2, inf2) = two;
        let opt2 = optimize_all(cfg, &sk2, &sim, &inf2, cfg.energy, None).map_err(EvalError::at(Stage::Optimize))?;
        outputs.push(("two_imu_inference", inf2));
        outputs.push(("two_imu_optimized", opt2));
    }

    let report = (|| -> Result<_, EvalError> {
        let mut stages = Vec::with_capacity(outputs.len());
        for (name, motions) in &outputs {
            stages.push(evaluate_stage(name, motions, &sim.test, &sim.truth, &skeleton, &cfg.eval.pck)?);
        }
        let report = MetricsReport { seed: cfg.seed, stages };
        fs::write(out.join("report.json"), io::to_json_pretty(&report)?)?;
        Ok(report)
    })()
    .map_err(EvalError::at(Stage::Eval))?;

    Ok(PipelineOutput {
        report,
        throughput: run.throughput,
        train_report,
    })
}
