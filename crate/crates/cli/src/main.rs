use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use vimocap::calibration::CalibrationResult;
use vimocap::eval::{
    apply_calibration, calibrate_stage, evaluate_stage, export_motion_text, infer_stage, optimize_sequence, run_pipeline,
    simulate_stage, train_stage, MetricsReport, PipelineConfig, Seeds,
};
use vimocap::inference::{load_weights, save_weights};
use vimocap::io;
use vimocap::kinematics::MotionSequence;
use vimocap::optimizer::EnergyWeights;
use vimocap::synth::Dataset;

#[derive(Parser)]
#[command(name = "vimocap", version, about = "Visual-inertial motion capture on a synthetic rig")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the calibration capture and the train/test datasets.
    Simulate,
    /// Estimate the sensor calibration from a calibration capture.
    Calibrate {
        /// Capture file; defaults to `<out>/calibration_capture.json`.
        #[arg(long)]
        capture: Option<PathBuf>,
    },
    /// Train the tracker stack.
    Train {
        /// Training dataset; defaults to `<out>/train`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Calibration applied to the raw IMU readings first.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Run the trained stack over a dataset.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Refine a network motion against one sequence's observations.
    Optimize {
        /// Network motion (JSON).
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sequence name; may be omitted for single-sequence datasets.
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        w3d: Option<f64>,
        #[arg(long)]
        w2d: Option<f64>,
        #[arg(long)]
        acc: Option<f64>,
        #[arg(long)]
        ori: Option<f64>,
    },
    /// Score predicted motions (`<pred>/<sequence>.json`) against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Stage label written to the report.
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Write a motion as plain text.
    Export {
        #[arg(long)]
        motion: PathBuf,
    },
    /// Run every stage end to end.
    Pipeline,
}

enum Failure {
    Usage(anyhow::Error),
    Stage(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn stage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Stage(e.into())
}

struct Ctx {
    config: PipelineConfig,
    seeded: bool,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, Failure> {
        let (mut config, mut seeded) = match &c.config {
            Some(p) => (PipelineConfig::load(p).map_err(usage)?, true),
            None => (PipelineConfig::with_seed(0), false),
        };
        if let Some(s) = c.seed {
            config.seed = s;
            seeded = true;
        }
        let out = c
            .out
            .clone()
            .or_else(|| config.paths.out.clone())
            .ok_or_else(|| usage(anyhow!("no output directory: pass --out or set paths.out")))?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).map_err(usage)?;
        Ok(Ctx { config, seeded, out })
    }

    fn require_seed(&self) -> Result<u64, Failure> {
        if self.seeded {
            Ok(self.config.seed)
        } else {
            Err(usage(anyhow!("a seed is required: pass --seed or use a config with `seed`")))
        }
    }
}

fn existing(p: &Path) -> Result<&Path, Failure> {
    if p.exists() {
        Ok(p)
    } else {
        Err(usage(anyhow!("{} does not exist", p.display())))
    }
}

fn read_dataset(dir: &Path, calibration: Option<&PathBuf>) -> Result<Dataset, Failure> {
    let mut d = Dataset::read(existing(dir)?).map_err(stage)?;
    if let Some(c) = calibration {
        let calib: CalibrationResult = io::read_json(existing(c)?).map_err(usage)?;
        apply_calibration(&mut d, &calib).map_err(stage)?;
    }
    Ok(d)
}

fn print_report(report: &MetricsReport) {
    for s in &report.stages {
        let a = &s.aggregate;
        let pck: Vec<String> = a.pck.iter().map(|(k, v)| format!("pck@{k} {v:.1}")).collect();
        println!(
            "{:<28} mpjpe {:>8.2} mm  aligned {:>8.2} mm  {}  accel_err {:.3}  accel {:.3}",
            s.stage,
            a.mpjpe_global,
            a.mpjpe_root_aligned,
            pck.join("  "),
            a.accel_error,
            a.accel_mean
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx::new(&cli.common)?;
    let cfg = &ctx.config;
    let out = ctx.out.as_path();
    match cli.command {
        Command::Simulate => {
            let seeds = Seeds::new(ctx.require_seed()?);
            let sim = simulate_stage(cfg, &seeds, true).map_err(stage)?;
            sim.write(out, true).map_err(stage)?;
            println!(
                "wrote {} train and {} test sequences to {}",
                sim.train.as_ref().map_or(0, |t| t.sequences.len()),
                sim.test.sequences.len(),
                out.display()
            );
        }
        Command::Calibrate { capture } => {
            let path = capture.unwrap_or_else(|| out.join("calibration_capture.json"));
            let obs = io::read_json(existing(&path)?).map_err(usage)?;
            let calib = calibrate_stage(&obs).map_err(stage)?;
            io::write_json(&out.join("calibration.json"), &calib).map_err(stage)?;
            println!("calibrated {} sensors", calib.r_s2b.len());
        }
        Command::Train { dataset, calibration } => {
            let seeds = Seeds::new(ctx.require_seed()?);
            let dir = dataset.unwrap_or_else(|| out.join("train"));
            let d = read_dataset(&dir, calibration.as_ref())?;
            let m = &d.manifest;
            let (stack, report) = train_stage(cfg, &m.skeleton, &m.rig, &d, seeds.stack, seeds.train).map_err(stage)?;
            save_weights(&stack, &out.join("weights.bin")).map_err(stage)?;
            io::write_json(&out.join("train_report.json"), &report).map_err(stage)?;
            for c in &report.curves {
                println!("{:?}: {} epochs, final loss {:.4e}", c.phase, c.losses.len(), c.losses.last().copied().unwrap_or(0.0));
            }
        }
        Command::Infer { weights, dataset, calibration } => {
            let stack = load_weights(existing(&weights)?).map_err(stage)?;
            let d = read_dataset(&dataset, calibration.as_ref())?;
            let run = infer_stage(&stack, &d).map_err(stage)?;
            let dir = out.join("infer");
            fs::create_dir_all(&dir).map_err(stage)?;
            for (m, s) in run.motions.iter().zip(&d.sequences) {
                io::write_json(&dir.join(format!("{}.json", s.name)), m).map_err(stage)?;
            }
            io::write_json(&out.join("throughput.json"), &run.throughput).map_err(stage)?;
            println!(
                "{} frames at {:.1} frames/s (hidden {})",
                run.throughput.frames, run.throughput.frames_per_second, run.throughput.hidden
            );
        }
        Command::Optimize {
            motion,
            dataset,
            sequence,
            calibration,
            w3d,
            w2d,
            acc,
            ori,
        } => {
            let init: MotionSequence = io::read_json(existing(&motion)?).map_err(usage)?;
            let d = read_dataset(&dataset, calibration.as_ref())?;
            let seq = match &sequence {
                Some(n) => d.sequences.iter().find(|s| &s.name == n).ok_or_else(|| usage(anyhow!("no sequence {n}")))?,
                None if d.sequences.len() == 1 => &d.sequences[0],
                None => return Err(usage(anyhow!("the dataset has several sequences; pass --sequence"))),
            };
            let mut weights: EnergyWeights = cfg.energy;
            weights.w3d = w3d.unwrap_or(weights.w3d);
            weights.w2d = w2d.unwrap_or(weights.w2d);
            weights.acc = acc.unwrap_or(weights.acc);
            weights.ori = ori.unwrap_or(weights.ori);
            let m = &d.manifest;
            let supervision = cfg.data.supervision_sensors.clone().unwrap_or_else(|| m.skeleton.bones());
            let mut cfg = cfg.clone();
            cfg.rig.inference_camera = m.inference_camera;
            let r = optimize_sequence(&cfg, &m.skeleton, &m.rig, seq, &init, &supervision, weights).map_err(stage)?;
            io::write_json(&out.join(format!("{}.json", seq.name)), &r.motion).map_err(stage)?;
            io::write_jsonl(&out.join(format!("{}.trace.jsonl", seq.name)), &r.trace).map_err(stage)?;
            for t in &r.trace {
                println!("window {}+{}: energy {:?}", t.start, t.len, t.energies);
            }
        }
        Command::Eval { pred, dataset, label } => {
            let d = read_dataset(&dataset, None)?;
            let motions = d
                .sequences
                .iter()
                .map(|s| io::read_json::<MotionSequence>(&pred.join(format!("{}.json", s.name))))
                .collect::<Result<Vec<_>, _>>()
                .map_err(usage)?;
            let m = &d.manifest;
            let st = evaluate_stage(&label, &motions, &d, &m.calibration, &m.skeleton, &cfg.eval.pck).map_err(stage)?;
            let report = MetricsReport {
                seed: cfg.seed,
                stages: vec![st],
            };
            fs::write(out.join("report.json"), io::to_json_pretty(&report).map_err(stage)?).map_err(stage)?;
            print_report(&report);
        }
        Command::Export { motion } => {
            let m: MotionSequence = io::read_json(existing(&motion)?).map_err(usage)?;
            let stem = motion.file_stem().and_then(|s| s.to_str()).unwrap_or("motion");
            let path = out.join(format!("{stem}.txt"));
            fs::write(&path, export_motion_text(&m).map_err(stage)?).map_err(stage)?;
            println!("wrote {}", path.display());
        }
        Command::Pipeline => {
            ctx.require_seed()?;
            let o = run_pipeline(cfg, out).map_err(stage)?;
            print_report(&o.report);
            println!(
                "inference throughput: {:.1} frames/s at hidden {}",
                o.throughput.frames_per_second, o.throughput.hidden
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
