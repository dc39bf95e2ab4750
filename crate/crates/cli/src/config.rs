use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use splatseg::mesh::MeshConfig;
use splatseg::optim::train::TrainConfig;
use splatseg::replenish::ReplenishConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub target_id: Option<u8>,
    pub p_ex: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            target_id: None,
            p_ex: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Boundary band width as a fraction of the image diagonal.
    pub band_frac: f64,
    /// Distance threshold of the geometry F1.
    pub f1_threshold: f64,
    /// Points sampled from each mesh.
    pub mesh_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            band_frac: splatseg::eval::DEFAULT_BAND_FRAC,
            f1_threshold: 0.01,
            mesh_samples: 100_000,
        }
    }
}

/// Settings of every stage. Built from defaults, then the config file, then
/// command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of all stages.
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub replenish: ReplenishConfig,
    pub mesh: MeshConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the global seed into every stage that draws random numbers.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.replenish.train.seed = s;
            self.replenish.request_seed = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\niterationz = 5").is_err());
        assert!(toml::from_str::<RunConfig>("[mesh.render]\nbogus = 1").is_err());
    }

    #[test]
    fn file_values_override_defaults() {
        let c: RunConfig = toml::from_str(
            "seed = 4\n[train]\niterations = 12\n[extract]\np_ex = 0.9\n[replenish]\nmask_mode = \"coverage\"\n",
        )
        .unwrap();
        assert_eq!(c.train.iterations, 12);
        assert_eq!(c.extract.p_ex, 0.9);
        assert_eq!(c.replenish.mask_mode, splatseg::replenish::MaskMode::Coverage);
        assert_eq!(c.mesh, MeshConfig::default());
        let mut c = c;
        c.apply_seed();
        assert_eq!((c.train.seed, c.replenish.train.seed, c.replenish.request_seed), (4, 4, 4));
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.extract.p_ex, 0.95);
    }
}
