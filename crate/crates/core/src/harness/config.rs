use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{TemperatureSchedule, TrainingConfig};
use crate::data::{DatasetSpec, Generator};
use crate::error::{check_range, Error, Result};
use crate::nn::BackboneSpec;
use crate::power::{GcPowerParams, DEFAULT_REGIMES};
use crate::tensor::{AdamConfig, LrSchedule};

pub const DEFAULT_MU_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_TARGETS: [f64; 3] = [0.001, 0.01, 0.05];
pub const DEFAULT_REPEATS: usize = 10;

/// Gated compression settings shared by every grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcConfig {
    #[serde(default = "one")]
    pub lambda_gc: f64,
    #[serde(default = "two")]
    pub mask_init: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}

impl Default for GcConfig {
    fn default() -> Self {
        GcConfig {
            lambda_gc: one(),
            mask_init: two(),
        }
    }
}

/// Inputs of the `power-sweep` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSweepConfig {
    pub rho: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    /// Compute shares `a`; `b = 1 - a`.
    #[serde(default = "default_a_grid")]
    pub grid: Vec<f64>,
}

fn default_a_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl PowerSweepConfig {
    pub fn params(&self) -> GcPowerParams {
        GcPowerParams {
            rho: self.rho,
            mu: self.mu,
            nu: self.nu,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulationMode {
    /// Bernoulli draws from the rates of the `power` section.
    Analytic,
    /// Decisions of a trained, calibrated model on the test split.
    Empirical,
}

/// Inputs of the `simulate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulationMode,
    /// Compute share `a` of the deployment.
    pub a: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Write a per-sample trace file.
    #[serde(default)]
    pub trace: bool,
    /// Target incorrect gating rate for the empirical mode.
    #[serde(default = "default_target")]
    pub target: f64,
}

fn default_samples() -> usize {
    1_000_000
}
fn default_target() -> f64 {
    0.01
}

/// Everything an experiment needs, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneSpec,
    pub dataset: DatasetSpec,
    pub training: TrainingConfig,
    #[serde(default)]
    pub gc: GcConfig,
    /// Insertion depth fractions.
    #[serde(default = "default_mu")]
    pub mu: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    /// Target incorrect gating rates.
    #[serde(default = "default_targets")]
    pub targets: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Root seed; every repeat derives its data and model seeds from it.
    #[serde(default)]
    pub seed: u64,
    /// Compute shares `a` used for power reports.
    #[serde(default = "default_regimes")]
    pub regimes: Vec<f64>,
    /// Checkpoint read by `calibrate`, `evaluate` and empirical `simulate`;
    /// defaults to `model.ckpt` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub power: Option<PowerSweepConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn default_mu() -> Vec<f64> {
    DEFAULT_MU_GRID.to_vec()
}
fn default_alpha() -> Vec<f64> {
    DEFAULT_ALPHA_GRID.to_vec()
}
fn default_targets() -> Vec<f64> {
    DEFAULT_TARGETS.to_vec()
}
fn default_repeats() -> usize {
    DEFAULT_REPEATS
}
fn default_regimes() -> Vec<f64> {
    DEFAULT_REGIMES.iter().map(|r| r.1).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.dataset.validate()?;
        self.training.validate()?;
        if self.dataset.generator.cols() != self.backbone.input_cols()
            || self.dataset.generator.rows_per_sample() != self.backbone.rows_per_sample()
        {
            return Err(Error::Config(format!(
                "dataset samples are {}x{} but the backbone expects {}x{}",
                self.dataset.generator.rows_per_sample(),
                self.dataset.generator.cols(),
                self.backbone.rows_per_sample(),
                self.backbone.input_cols()
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        for (name, list) in [
            ("mu", &self.mu),
            ("alpha", &self.alpha),
            ("targets", &self.targets),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("`{name}` list is empty")));
            }
        }
        for &mu in &self.mu {
            if !(mu > 0.0 && mu < 1.0) {
                return Err(Error::OutOfRange {
                    name: "mu",
                    value: mu,
                    reason: "insertion depth fraction must lie strictly between 0 and 1",
                });
            }
        }
        for &alpha in &self.alpha {
            check_range("alpha", alpha, 0.0, 1.0)?;
        }
        for &t in &self.targets {
            check_range("target_incorrect_rate", t, 0.0, 0.999_999)?;
        }
        for &a in &self.regimes {
            check_range("regime a", a, 0.0, 1.0)?;
        }
        check_range("lambda_gc", self.gc.lambda_gc, 0.0, f64::MAX)?;
        if let Some(p) = &self.power {
            p.params().validate()?;
            if p.grid.is_empty() {
                return Err(Error::Config("power.grid is empty".into()));
            }
        }
        if let Some(s) = &self.simulate {
            check_range("simulate.a", s.a, 0.0, 1.0)?;
            if s.samples == 0 {
                return Err(Error::Config("simulate.samples must be positive".into()));
            }
        }
        Ok(())
    }

    /// Desk-scale default: a 20-unit, 96-wide residual MLP on Gaussian
    /// clusters with a 20% positive share. Two positive classes and six background
    /// clusters overlap slightly, so a few percent of positives are
    /// ambiguous.
    pub fn default_task() -> Self {
        ExperimentConfig {
            backbone: BackboneSpec::Mlp {
                input_dim: 16,
                width: 96,
                depth: 20,
            },
            dataset: DatasetSpec {
                generator: Generator::GaussianClusters {
                    dim: 16,
                    background_clusters: 6,
                    separation: 4.0,
                    noise: 1.0,
                },
                num_positive_classes: 2,
                rho: 0.2,
                n_train: 4000,
                n_val: 5000,
                n_test: 5000,
                seed: 0,
                stratified: true,
            },
            training: TrainingConfig {
                epochs: 12,
                batch_size: 64,
                schedule: LrSchedule::CosineDecay {
                    initial: 3e-3,
                    decay_steps: 756,
                    final_fraction: 0.05,
                },
                adam: AdamConfig::default(),
                mask_temperature: Some(TemperatureSchedule {
                    initial: 1.0,
                    last: 0.01,
                    anneal_fraction: 0.5,
                }),
            },
            gc: GcConfig {
                lambda_gc: 0.45,
                mask_init: 0.5,
            },
            mu: default_mu(),
            alpha: default_alpha(),
            targets: default_targets(),
            repeats: DEFAULT_REPEATS,
            seed: 0,
            regimes: default_regimes(),
            checkpoint: None,
            power: None,
            simulate: None,
        }
    }
}

#[cfg(test)]
pub(crate) fn tiny_task() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_task();
    cfg.backbone = BackboneSpec::Mlp {
        input_dim: 4,
        width: 8,
        depth: 4,
    };
    cfg.dataset.generator = Generator::GaussianClusters {
        dim: 4,
        background_clusters: 2,
        separation: 4.0,
        noise: 1.0,
    };
    cfg.dataset.n_train = 200;
    cfg.dataset.n_val = 200;
    cfg.dataset.n_test = 200;
    cfg.training.epochs = 2;
    cfg.training.batch_size = 32;
    cfg.training.schedule = LrSchedule::Constant { rate: 5e-3 };
    cfg.mu = vec![0.5];
    cfg.alpha = vec![0.5];
    cfg.targets = vec![0.01];
    cfg.repeats = 3;
    cfg
}
