//! Run configuration: one TOML file with a default for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bo::{NlpOracle, Scenario, TerrainSampler, TrainConfig, TrainSetup};
use crate::collocation::{MeritWeights, SolverConfig, PHASE_SLOTS};
use crate::eval::DuelConfig;
use crate::gp::KernelParams;
use crate::hopper::HopperParams;
use crate::terrain::{nearest_indices, Heightmap, TerrainModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    /// Base heightmap file; the built-in flat map when absent.
    pub file: Option<PathBuf>,
    /// Positions along x whose nearest heightmap nodes vary on rough terrain.
    pub variable_positions: Vec<f64>,
    /// Standard deviation of the rough-terrain node heights.
    pub sigma: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self { file: None, variable_positions: vec![0.4, 0.5, 0.6], sigma: 0.1 }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variable_positions.is_empty() {
            return Err(Error::Config("terrain.variable_positions must not be empty".into()));
        }
        if self.variable_positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("terrain.variable_positions must be finite".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config("terrain.sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn base_heightmap(&self) -> Result<Heightmap> {
        match &self.file {
            Some(path) => Heightmap::load(path),
            None => Ok(TerrainModel::flat_default().heightmap().clone()),
        }
    }

    pub fn sampler(&self) -> Result<TerrainSampler> {
        let base = self.base_heightmap()?;
        let mut indices = nearest_indices(&base, &self.variable_positions);
        indices.sort_unstable();
        indices.dedup();
        if indices.len() != self.variable_positions.len() {
            return Err(Error::Config("terrain.variable_positions map to repeated heightmap nodes".into()));
        }
        TerrainSampler::new(base, indices, self.sigma)
    }
}

/// Kernel hyperparameters, shared by all terrain features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub goal_lengthscale: f64,
    pub terrain_lengthscale: f64,
    pub action_lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        let d = KernelParams::with_defaults(1);
        Self {
            goal_lengthscale: d.context_lengthscales[0],
            terrain_lengthscale: d.context_lengthscales[1],
            action_lengthscale: d.action_lengthscales[0],
            signal_variance: d.signal_variance,
            noise_variance: d.noise_variance,
        }
    }
}

impl KernelConfig {
    pub fn params(&self, n_t: usize) -> KernelParams {
        let mut context_lengthscales = vec![self.goal_lengthscale];
        context_lengthscales.extend(std::iter::repeat_n(self.terrain_lengthscale, n_t));
        KernelParams {
            context_lengthscales,
            action_lengthscales: vec![self.action_lengthscale; PHASE_SLOTS],
            signal_variance: self.signal_variance,
            noise_variance: self.noise_variance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hopper: HopperParams,
    pub terrain: TerrainConfig,
    pub solver: SolverConfig,
    pub merit: MeritWeights,
    pub kernel: KernelConfig,
    pub bo: TrainConfig,
    pub eval: DuelConfig,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hopper.validate().map_err(config_err)?;
        self.terrain.validate()?;
        self.solver.validate().map_err(config_err)?;
        self.merit.validate().map_err(config_err)?;
        self.kernel.params(1).validate().map_err(config_err)?;
        self.bo.validate()?;
        self.eval.validate().map_err(config_err)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn oracle(&self) -> NlpOracle {
        NlpOracle { hopper: self.hopper.clone(), solver: self.solver.clone(), weights: self.merit }
    }

    pub fn train_setup(&self) -> Result<TrainSetup> {
        let sampler = self.terrain.sampler()?;
        let kernel = self.kernel.params(sampler.feature_count(self.bo.scenario));
        Ok(TrainSetup { config: self.bo.clone(), kernel, sampler })
    }

    pub fn kernel_for(&self, scenario: Scenario) -> Result<KernelParams> {
        Ok(self.kernel.params(self.terrain.sampler()?.feature_count(scenario)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        assert_eq!(c.train_setup().unwrap().kernel, KernelParams::with_defaults(0));
    }

    #[test]
    fn partial_and_invalid() {
        let c = RunConfig::from_toml("[bo]\nseed = 3\nscenario = \"rough\"\n").unwrap();
        assert_eq!(c.bo.seed, 3);
        assert_eq!(c.train_setup().unwrap().kernel.context_dim(), 4);
        assert!(matches!(RunConfig::from_toml("[bo]\nrho = 0.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[bo]\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[terrain]\nsigma = -1.0\n"), Err(Error::Config(_))));
    }
}
