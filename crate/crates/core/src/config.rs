//! TOML pack configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cycle::CycleGenerator;
use crate::error::ConfigError;
use crate::estimator::EkfConfig;
use crate::fom::{FomParams, OcvPolynomial, SECONDS_PER_HOUR};
use crate::identify::{SearchSpace, SwarmConfig, Theta};
use crate::pack::{NoiseConfig, PackLimits, PackModel};

fn default_capacity_ah() -> f64 {
    3.2
}

fn default_one() -> f64 {
    1.0
}

fn default_ts() -> f64 {
    FomParams::DEFAULT_TS
}

fn default_memory() -> usize {
    FomParams::DEFAULT_MEMORY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_capacity_ah")]
    pub capacity_ah: f64,
    #[serde(default = "default_one")]
    pub eta: f64,
    /// True initial SOC.
    #[serde(default = "default_one")]
    pub soc0: f64,
    /// Initial filter estimate; defaults to `soc0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soc_estimate: Option<f64>,
}

impl CellConfig {
    pub fn from_theta(theta: &Theta, capacity_ah: f64, eta: f64) -> Self {
        Self {
            r0: theta.r0,
            r1: theta.r1,
            r2: theta.r2,
            c1: theta.c1,
            c2: theta.c2,
            alpha: theta.alpha,
            beta: theta.beta,
            capacity_ah,
            eta,
            soc0: 1.0,
            soc_estimate: None,
        }
    }

    fn params(&self, ts: f64, memory: usize, ocv: OcvPolynomial) -> FomParams {
        FomParams {
            r0: self.r0,
            r1: self.r1,
            r2: self.r2,
            c1: self.c1,
            c2: self.c2,
            alpha: self.alpha,
            beta: self.beta,
            capacity: self.capacity_ah * SECONDS_PER_HOUR,
            eta: self.eta,
            ts,
            memory,
            ocv,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentifyConfig {
    pub search: SearchSpace,
    pub swarm: SwarmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackConfig {
    #[serde(default = "default_ts")]
    pub ts: f64,
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default)]
    pub ocv: OcvPolynomial,
    #[serde(default)]
    pub limits: PackLimits,
    pub cells: Vec<CellConfig>,
    #[serde(default)]
    pub estimator: EkfConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub identify: IdentifyConfig,
    #[serde(default)]
    pub generator: CycleGenerator,
}

impl PackConfig {
    /// Two-cell NCR18650B pack with the reference parameter sets.
    ///
    /// Cell 2 is given a 3.02 Ah effective capacity, which produces a
    /// baseline end-of-discharge SOC gap of about five percent. Both cells
    /// start full; the filters start at 95 %.
    pub fn reference() -> Self {
        let cell = |p: FomParams, capacity_ah: f64| CellConfig {
            soc0: 1.0,
            soc_estimate: Some(0.95),
            ..CellConfig::from_theta(&Theta::of(&p), capacity_ah, 1.0)
        };
        Self {
            ts: FomParams::DEFAULT_TS,
            memory: FomParams::DEFAULT_MEMORY,
            ocv: OcvPolynomial::default(),
            limits: PackLimits::default(),
            cells: vec![
                cell(FomParams::reference_cell1(), 3.2),
                cell(FomParams::reference_cell2(), 3.02),
            ],
            estimator: EkfConfig::default(),
            noise: NoiseConfig::default(),
            identify: IdentifyConfig::default(),
            generator: CycleGenerator::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.limits.validate()?;
        for p in self.cell_params() {
            p.validate()?;
        }
        for z in self.initial_soc().into_iter().chain(self.soc_estimate()) {
            if !(0.0..=1.0).contains(&z) {
                return Err(crate::error::ModelError::SocOutOfRange(z).into());
            }
        }
        self.identify.search.validate()?;
        self.identify.swarm.validate()?;
        Ok(())
    }

    pub fn cell_params(&self) -> Vec<FomParams> {
        self.cells
            .iter()
            .map(|c| c.params(self.ts, self.memory, self.ocv))
            .collect()
    }

    pub fn pack_model(&self) -> Result<PackModel, ConfigError> {
        Ok(PackModel::new(self.cell_params(), self.limits)?)
    }

    pub fn initial_soc(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.soc0).collect()
    }

    pub fn soc_estimate(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.soc_estimate.unwrap_or(c.soc0))
            .collect()
    }
}

/// `[[cells]]` table for identified parameters, ready to paste into a pack
/// config.
pub fn parameter_file(theta: &Theta, base: &FomParams) -> Result<String, ConfigError> {
    #[derive(Serialize)]
    struct File {
        cells: Vec<CellConfig>,
    }
    let cell = CellConfig::from_theta(theta, base.capacity / SECONDS_PER_HOUR, base.eta);
    toml::to_string(&File { cells: vec![cell] }).map_err(|e| ConfigError::Serialize(e.to_string()))
}
