//! Run configuration: every section has defaults, a preset fills in the
//! training scale, and a TOML file may override any key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::RosenbergParams;
use crate::fdm::FdmConfig;
use crate::geometry::TubeSpec;
use crate::loss::{SetSizes, WeightOverrides};
use crate::physics::{LossConstants, PhysicalConstants};
use crate::resonet::NetworkConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Reduced scale that trains in minutes on one core.
    Desk,
    /// Width 200, 5 blocks, 100 000 epochs, 5000 interior points.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    /// Initial estimates as multiples of the true constants.
    pub gc_init_factor: f64,
    pub rc_init_factor: f64,
    /// Measurement noise, as a fraction of the clean signal's standard deviation.
    pub noise: f64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            gc_init_factor: 1.5,
            rc_init_factor: 0.5,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    pub factor: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self { factor: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub width: usize,
    pub blocks: usize,
    /// Parameters sampled per loss term.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            width: 16,
            blocks: 2,
            samples: 40,
            step: 1e-6,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of an earlier `fdm-forward` run to compare a forward PINN against.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub constants: PhysicalConstants,
    /// True wall-loss constants used by the finite-difference solver and the forward problem.
    pub losses: LossConstants,
    pub tube: TubeSpec,
    pub excitation: RosenbergParams,
    pub fdm: FdmConfig,
    pub network: NetworkConfig,
    pub collocation: SetSizes,
    pub weights: WeightOverrides,
    pub training: TrainConfig,
    pub identification: IdentificationConfig,
    pub sensitivity: SensitivityConfig,
    pub gradcheck: GradcheckConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (network, collocation, training) = match preset {
            Preset::Desk => (
                NetworkConfig {
                    width: 64,
                    blocks: 3,
                    time_harmonics: 7,
                    ..NetworkConfig::default()
                },
                SetSizes {
                    interior: 2000,
                    boundary: 250,
                    coupling: 250,
                    periodic: 250,
                    measurement: 250,
                },
                TrainConfig {
                    epochs: 20_000,
                    freeze_epochs: 2_000,
                    ..TrainConfig::default()
                },
            ),
            Preset::Paper => (
                NetworkConfig {
                    width: 200,
                    blocks: 5,
                    ..NetworkConfig::default()
                },
                SetSizes::default(),
                TrainConfig {
                    epochs: 100_000,
                    freeze_epochs: 10_000,
                    ..TrainConfig::default()
                },
            ),
        };
        Self {
            seed: 1,
            constants: PhysicalConstants::default(),
            losses: LossConstants::REFERENCE,
            tube: TubeSpec::default(),
            excitation: RosenbergParams::default(),
            fdm: FdmConfig::default(),
            network,
            collocation,
            weights: WeightOverrides::default(),
            training,
            identification: IdentificationConfig::default(),
            sensitivity: SensitivityConfig::default(),
            gradcheck: GradcheckConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Overlay a TOML document onto a preset. Keys absent from the document
    /// keep their preset values; unknown keys are rejected.
    pub fn from_toml_str(text: &str, preset: Preset) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overlay);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, preset)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.constants.validate())?;
        wrap(self.losses.validate())?;
        wrap(self.excitation.validate())?;
        wrap(self.network.validate())?;
        wrap(self.training.validate())?;
        wrap(self.tube.build().map(|_| ()))?;
        let id = &self.identification;
        if !(id.gc_init_factor > 0.0 && id.rc_init_factor > 0.0 && id.noise >= 0.0) {
            return Err(Error::Config("identification factors must be positive and noise non-negative".into()));
        }
        if !(self.sensitivity.factor > 0.0) {
            return Err(Error::Config("sensitivity factor must be positive".into()));
        }
        Ok(())
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (key, value) in overlay {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(key, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}
