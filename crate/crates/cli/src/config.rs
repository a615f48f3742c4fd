//! Experiment configuration: TOML files with defaults, plus the handful of
//! command-line overrides that make sweeps convenient.
//!
//! Every field has a default, so a config file only states what it changes.
//! The fully resolved configuration (file ⊕ defaults ⊕ CLI overrides) is
//! serialized next to each run's outputs for provenance.

use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use wcq_core::device::{DeviceConfig, NoiseDistribution};
use wcq_core::model::WeightMode;
use wcq_core::search::SearchConfig;
use wcq_core::surrogate::SurrogateKind;
use wcq_core::train::{LrSchedule, OptimizerKind, TrainConfig};
use wcq_core::Error;

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Run name; output directory defaults to `runs/<name>`.
    pub name: String,
    pub seed: u64,
    /// Output directory override (empty = `runs/<name>`).
    pub out_dir: String,
    /// Free-form annotation copied verbatim into every emitted report, e.g.
    /// to flag a reduced epoch budget or a calibration run.
    pub notes: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { name: "experiment".into(), seed: 0, out_dir: String::new(), notes: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Trained checkpoint consumed by the analysis stages (`attack`, `mc`,
    /// `pgd`). Training stages ignore it.
    pub checkpoint: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { arch: "lenet".into(), weight_bits: 4, act_bits: 4, checkpoint: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: String,
    /// Root directory holding the dataset subdirectories.
    pub dir: String,
    /// Cap on training samples (0 = all), taken class-balanced.
    pub train_subset: usize,
    /// Validation samples used for per-epoch checkpoint selection (0 = all).
    pub val_subset: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dataset: "mnist".into(), dir: "data".into(), train_subset: 0, val_subset: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `sgd` or `adam`.
    pub optimizer: String,
    /// `constant` or `cosine`.
    pub schedule: String,
    pub augment: bool,
    /// Uniform weight-noise bound injected each training step
    /// (variation-aware training); 0 disables.
    pub noise_bound: f64,
    /// Train with full-precision weights instead of simulated quantization.
    pub full_precision: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            optimizer: "sgd".into(),
            schedule: "cosine".into(),
            augment: false,
            noise_bound: 0.0,
            full_precision: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSection {
    pub bits_per_weight: u32,
    pub bits_per_cell: u32,
    pub cell_threshold: f64,
    #[serde(default = "default_one")]
    pub weight_scale: f64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        let d = DeviceConfig::default();
        Self {
            bits_per_weight: d.bits_per_weight,
            bits_per_cell: d.bits_per_cell,
            cell_threshold: d.cell_threshold,
            weight_scale: d.weight_scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Accuracy surrogate: `p1` … `p7`.
    pub surrogate: String,
    /// Fixed penalty weight used when running a single optimization.
    pub c: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Samples the attack optimizes and reports over (0 = full test set).
    pub eval_subset: usize,
    /// Penalty-weight bisection rounds.
    pub search_rounds: usize,
    pub c_lo: f64,
    pub c_hi: f64,
    /// Accumulate each step's gradient over the whole evaluation set; turn
    /// off for the large network, where single-chunk steps are the only way
    /// to fit the iteration budget.
    pub full_batch: bool,
    /// Half-width of the uniform random perturbation initialization
    /// (0 = start at zero, the default).
    pub random_init: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            surrogate: "p2".into(),
            c: 1e-3,
            lr: 1e-4,
            iterations: 500,
            batch_size: 256,
            eval_subset: 1000,
            search_rounds: 12,
            c_lo: 1e-8,
            c_hi: 1e-1,
            full_batch: true,
            random_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub runs: usize,
    /// `uniform` or `gaussian`.
    pub distribution: String,
}

impl Default for McSection {
    fn default() -> Self {
        Self { runs: 10_000, distribution: "uniform".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdSection {
    pub steps: usize,
    /// Step size as a fraction of the bound.
    pub step_fraction: f64,
}

impl Default for PgdSection {
    fn default() -> Self {
        Self { steps: 40, step_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Write-verify bounds (th_g values) to evaluate.
    pub bounds: Vec<f64>,
    /// Independently trained checkpoints the sweep averages over (the "seeds"
    /// of the curve); each is searched at every bound.
    pub checkpoints: Vec<String>,
    /// Accuracy-drop tolerance (points) for the recommended-threshold rule.
    pub drop_tolerance: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            bounds: vec![0.0, 0.001, 0.003, 0.005, 0.007, 0.009, 0.012, 0.02, 0.03],
            checkpoints: Vec::new(),
            drop_tolerance: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvSection {
    /// Penalty weight of the truncated inner search.
    pub inner_c: f64,
    /// Inner-search iterations per outer step.
    pub inner_iterations: usize,
    pub inner_lr: f64,
    /// Run the inner search at full fidelity (same budget as the analysis
    /// attack) instead of the truncated schedule.
    pub full_fidelity: bool,
}

impl Default for AdvSection {
    fn default() -> Self {
        Self { inner_c: 1e-3, inner_iterations: 5, inner_lr: 1e-3, full_fidelity: false }
    }
}

/// The complete experiment configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub device: DeviceSection,
    pub attack: AttackSection,
    pub mc: McSection,
    pub pgd: PgdSection,
    pub sweep: SweepSection,
    pub adv: AdvSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub th_g: Option<f64>,
    pub out_dir: Option<String>,
    pub checkpoint: Option<String>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies CLI overrides. A `--thg` override adjusts the cell threshold
    /// so the derived bound equals the requested value.
    pub fn apply(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(seed) = ov.seed {
            self.experiment.seed = seed;
        }
        if let Some(th_g) = ov.th_g {
            if th_g < 0.0 || !th_g.is_finite() {
                return Err(CliError::Config(format!("--thg {th_g} must be non-negative")));
            }
            // th_g scales linearly in cell_threshold: invert through the
            // current device geometry
            let unit = DeviceConfig {
                cell_threshold: 1.0,
                ..self.device_config()?
            }
            .th_g();
            self.device.cell_threshold = th_g / unit;
        }
        if let Some(dir) = &ov.out_dir {
            self.experiment.out_dir = dir.clone();
        }
        if let Some(ckpt) = &ov.checkpoint {
            self.model.checkpoint = ckpt.clone();
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        if self.experiment.out_dir.is_empty() {
            PathBuf::from("runs").join(&self.experiment.name)
        } else {
            PathBuf::from(&self.experiment.out_dir)
        }
    }

    pub fn device_config(&self) -> Result<DeviceConfig> {
        let cfg = DeviceConfig {
            bits_per_weight: self.device.bits_per_weight,
            bits_per_cell: self.device.bits_per_cell,
            cell_threshold: self.device.cell_threshold,
            weight_scale: self.device.weight_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn quant_config(&self) -> wcq_core::quant::QuantConfig {
        wcq_core::quant::QuantConfig {
            weight_bits: self.model.weight_bits,
            act_bits: self.model.act_bits,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.train.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => {
                return Err(CliError::Config(format!(
                    "unknown optimizer `{other}` (expected `sgd` or `adam`)"
                )))
            }
        };
        let schedule = match self.train.schedule.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            other => {
                return Err(CliError::Config(format!(
                    "unknown schedule `{other}` (expected `constant` or `cosine`)"
                )))
            }
        };
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            optimizer,
            schedule,
            augment: self.train.augment,
            weight_mode: if self.train.full_precision {
                WeightMode::Float
            } else {
                WeightMode::SimulatedQuant
            },
            noise_bound: self.train.noise_bound,
            val_subset: self.data.val_subset,
            seed: self.experiment.seed,
        })
    }

    /// Search hyper-parameters for the analysis-stage worst-case attack.
    /// The bound comes from the device geometry.
    pub fn search_config(&self) -> Result<SearchConfig> {
        let surrogate: SurrogateKind = self
            .attack
            .surrogate
            .parse()
            .map_err(|e: Error| CliError::Config(e.to_string()))?;
        Ok(SearchConfig {
            surrogate,
            c: self.attack.c,
            lr: self.attack.lr,
            iters: self.attack.iterations,
            th_g: self.device_config()?.th_g(),
            batch: self.attack.batch_size,
            full_batch: self.attack.full_batch,
            c_lo: self.attack.c_lo,
            c_hi: self.attack.c_hi,
            rounds: self.attack.search_rounds,
            random_init: self.attack.random_init,
            seed: self.experiment.seed,
        })
    }

    /// The truncated search budget run inside each adversarial-training step.
    /// Bound and batching are superseded by the trainer.
    pub fn inner_search_config(&self) -> Result<SearchConfig> {
        Ok(SearchConfig {
            c: self.adv.inner_c,
            lr: self.adv.inner_lr,
            iters: self.adv.inner_iterations,
            ..self.search_config()?
        })
    }

    pub fn noise_distribution(&self) -> Result<NoiseDistribution> {
        match self.mc.distribution.as_str() {
            "uniform" => Ok(NoiseDistribution::Uniform),
            "gaussian" => Ok(NoiseDistribution::Gaussian),
            other => Err(CliError::Config(format!(
                "unknown distribution `{other}` (expected `uniform` or `gaussian`)"
            ))),
        }
    }
}
