use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::inference::{LossWeights, Schedule};
use crate::kinematics::SkeletonConfig;
use crate::optimizer::{EnergyWeights, DEFAULT_WINDOW};
use crate::synth::{MotionKind, NoiseSpec, Rig};

/// Everything a pipeline run depends on. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub energy: EnergyWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Optional input files. Relative paths are resolved against the config
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Skeleton JSON; the default humanoid when absent.
    pub skeleton: Option<PathBuf>,
    /// Rig JSON; built from `[rig]` when absent.
    pub cameras: Option<PathBuf>,
    /// Ground-truth sensor mounting JSON; drawn from the seed when absent.
    pub calibration: Option<PathBuf>,
    /// Test dataset directory; simulated when absent.
    pub dataset: Option<PathBuf>,
    /// Trained weights; the stack is trained when absent.
    pub weights: Option<PathBuf>,
    /// Output directory; the command line may override it.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub cameras: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    pub focal: f64,
    pub width: u32,
    pub image_height: u32,
    pub inference_camera: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            cameras: 4,
            radius: 3.0,
            height: 1.5,
            target: [0.0, 0.0, 1.0],
            focal: 800.0,
            width: 1024,
            image_height: 768,
            inference_camera: 0,
        }
    }
}

impl RigConfig {
    pub fn build(&self) -> Rig {
        Rig::ring(
            self.cameras,
            self.radius,
            self.height,
            Vector3::from(self.target),
            self.focal,
            self.width,
            self.image_height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub kinds: Vec<MotionKind>,
    pub noise: NoiseSpec,
    /// Sensors simulated for training supervision; every bone when absent.
    pub supervision_sensors: Option<Vec<usize>>,
    /// Write the simulated datasets to the output directory.
    pub write: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_sequences: 20,
            test_sequences: 5,
            frames: 240,
            fps: 30.0,
            kinds: MotionKind::ALL.to_vec(),
            noise: NoiseSpec::default(),
            supervision_sensors: None,
            write: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Standard deviation of the rotation noise on the calibration capture.
    pub noise_deg: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { noise_deg: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 64, dropout: 0.5 }
    }
}

/// Starting motion of the refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Network,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub enabled: bool,
    pub window: usize,
    /// Cameras entering the 2D term; the inference camera when absent.
    pub cameras: Option<Vec<usize>>,
    pub init: InitKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            enabled: true,
            window: DEFAULT_WINDOW,
            cameras: None,
            init: InitKind::Network,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pck: Vec<f64>,
    /// Also run the refinement without inertial terms and the two-sensor
    /// stack.
    pub ablations: bool,
    pub ablation_imus: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pck: vec![0.2, 0.3],
            ablations: false,
            ablation_imus: SkeletonConfig::two_imu_humanoid().imu_map,
        }
    }
}

impl PipelineConfig {
    /// Default settings with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig {
            seed,
            paths: PathsConfig::default(),
            rig: RigConfig::default(),
            data: DataConfig::default(),
            calibration: CalibrationConfig::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            loss: LossWeights::default(),
            energy: EnergyWeights::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, EvalError> {
        let mut cfg: PipelineConfig = toml::from_str(text)?;
        let p = &mut cfg.paths;
        for path in [&mut p.skeleton, &mut p.cameras, &mut p.calibration, &mut p.dataset, &mut p.weights, &mut p.out]
            .into_iter()
            .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|_| EvalError::MissingFile(path.to_path_buf()))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        let p = &self.paths;
        for path in [&p.skeleton, &p.cameras, &p.calibration, &p.dataset, &p.weights].into_iter().flatten() {
            if !path.exists() {
                return Err(EvalError::MissingFile(path.clone()));
            }
        }
        if self.data.frames < 3 {
            return bad("data.frames must be at least 3");
        }
        if self.data.test_sequences == 0 && p.dataset.is_none() {
            return bad("data.test_sequences must be positive");
        }
        if !(self.data.fps > 0.0) {
            return bad("data.fps must be positive");
        }
        if self.data.kinds.is_empty() {
            return bad("data.kinds is empty");
        }
        if p.cameras.is_none() && (self.rig.cameras == 0 || self.rig.inference_camera >= self.rig.cameras) {
            return bad("rig.inference_camera must name one of the cameras");
        }
        if self.model.hidden == 0 || !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.hidden must be positive and model.dropout in [0, 1)");
        }
        if !(self.calibration.noise_deg >= 0.0) {
            return bad("calibration.noise_deg must be non-negative");
        }
        if self.optimizer.window < 3 {
            return bad("optimizer.window must be at least 3");
        }
        if self.eval.pck.iter().any(|t| !(*t > 0.0)) {
            return bad("eval.pck thresholds must be positive");
        }
        let w = &self.energy;
        if [w.w3d, w.w2d, w.acc, w.ori].iter().any(|v| !(*v >= 0.0)) {
            return bad("energy weights must be non-negative");
        }
        Ok(())
    }
}
