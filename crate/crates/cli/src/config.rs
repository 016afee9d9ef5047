use std::path::{Path, PathBuf};

use anyhow::Context;
use qsoc_core::photonics::CollectionEfficiency;
use qsoc_core::{
    EnsembleConfig, FrequencyGrid, LifetimeSet, ModeVolumeUnit, PhotonBudget,
    ReadoutModel, RegistryParams, SynthParams, TuningLaw,
};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Top-level experiment file. Module sections map onto the core parameter
/// types; module seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub ensemble: EnsembleConfig,
    pub grid: FrequencyGrid,
    pub law: TuningLaw,
    pub pc_sweep: PcSweepConfig,
    pub registry: RegistryConfig,
    pub spam: SpamConfig,
    pub photonics: PhotonicsConfig,
    pub scaling: ScalingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "qsoc".into(),
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            ensemble: EnsembleConfig::default(),
            grid: FrequencyGrid::default(),
            law: TuningLaw::default(),
            pc_sweep: PcSweepConfig::default(),
            registry: RegistryConfig::default(),
            spam: SpamConfig::default(),
            photonics: PhotonicsConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcSweepConfig {
    /// Mean tuning range over inhomogeneous range.
    pub ratios: Vec<f64>,
    pub n_qubits: Vec<usize>,
    pub trials: usize,
}

impl Default for PcSweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![
                0.0, 0.005, 0.01, 0.013, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0,
            ],
            n_qubits: vec![10, 100, 1000],
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Linear,
    UniformFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    /// Load frames from here instead of synthesizing them.
    pub frames_dir: Option<PathBuf>,
    pub n_voltages: usize,
    pub sweep: SweepKind,
    pub synth: SynthParams,
    pub params: RegistryParams,
    pub n_sys: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            frames_dir: None,
            n_voltages: 201,
            sweep: SweepKind::UniformFrequency,
            synth: SynthParams::default(),
            params: RegistryParams::default(),
            n_sys: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpamConfig {
    /// Load `shot,bin1,bin2,bin3` records instead of simulating them.
    pub records: Option<PathBuf>,
    pub model: ReadoutModel,
    pub c_th: Vec<u32>,
    /// Duration of one preparation attempt.
    pub cycle_time_us: f64,
}

impl Default for SpamConfig {
    fn default() -> Self {
        Self {
            records: None,
            model: ReadoutModel::default(),
            c_th: (0..=30).collect(),
            cycle_time_us: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityConfig {
    pub wavelength_over_n: f64,
    pub q: f64,
    pub mode_volume: f64,
    pub unit: ModeVolumeUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotonicsConfig {
    pub budget: PhotonBudget,
    pub lifetimes: LifetimeSet,
    pub cavity: Option<CavityConfig>,
    pub collection: CollectionEfficiency,
}

impl Default for PhotonicsConfig {
    fn default() -> Self {
        Self {
            budget: PhotonBudget::default(),
            lifetimes: LifetimeSet::default(),
            cavity: None,
            collection: CollectionEfficiency::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSize {
    pub label: String,
    pub n_sys: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub n_emitter: f64,
    pub p_c: f64,
    pub k_max: Vec<u32>,
    pub systems: Vec<SystemSize>,
    /// Adds a system sized by the resolvable spots of a wide-field objective.
    pub fov_diameter_um: Option<f64>,
    pub spot_spacing_um: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            n_emitter: 2.3,
            p_c: 1.0,
            k_max: vec![1, 11],
            systems: vec![
                SystemSize {
                    label: "qmc".into(),
                    n_sys: 16.0,
                },
                SystemSize {
                    label: "chip".into(),
                    n_sys: 1024.0,
                },
            ],
            fov_diameter_um: Some(2650.0),
            spot_spacing_um: 2.52,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(Failure::io)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| Failure::Config(e.to_string()))
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if ov.threads.is_some() {
            cfg.threads = ov.threads;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
