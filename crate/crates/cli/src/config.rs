//! Run configuration: one JSON document, defaults for every field.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! command-line flags. Nested `seed` fields are always derived from the
//! top-level `seed`, so a single number reproduces a whole run.

use std::fs;
use std::path::{Path, PathBuf};

use ccmlab::geometry::ArrayConfig;
use ccmlab::nn::TrainConfig;
use ccmlab::rng;
use ccmlab::scene::Scene;
use ccmlab::sim::{ExperimentConfig, FrameTiming, TrajectoryMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Dataset sizes. Location counts are per set; speeds are drawn per location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub lcnet_train_locations: usize,
    pub lcnet_train_speeds: usize,
    pub lcnet_test_locations: usize,
    pub lcnet_test_speeds: usize,
    pub lenet_train_locations: usize,
    pub lenet_test_locations: usize,
    /// Labelled channels used for the location-error statistics.
    pub stats_locations: usize,
    /// Noise draws per statistics channel.
    pub stats_draws: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            lcnet_train_locations: 30_000,
            lcnet_train_speeds: 40,
            lcnet_test_locations: 1_000,
            lcnet_test_speeds: 5,
            lenet_train_locations: 30_000,
            lenet_test_locations: 1_000,
            stats_locations: 9_000,
            stats_draws: 20,
        }
    }
}

/// Training-set sweep of the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fractions: Vec<f64>,
    /// Independent retrainings per fraction, each with its own seed.
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { fractions: vec![0.25, 0.5, 1.0], repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Scene JSON; the built-in default scene when absent.
    pub scene: Option<PathBuf>,
    pub array: ArrayConfig,
    pub timing: FrameTiming,
    /// Label grid points per side of the coverage area.
    pub grid_per_side: usize,
    pub data: DataConfig,
    pub lcnet_train: TrainConfig,
    pub lenet_train: TrainConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
    /// Location-noise levels swept by `run`; `experiment.sigma_c` is ignored.
    pub sigma_c_sweep: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: rng::DEFAULT_SEED,
            out_dir: PathBuf::from("out"),
            scene: None,
            array: ArrayConfig::default(),
            timing: FrameTiming::default(),
            grid_per_side: 250,
            data: DataConfig::default(),
            lcnet_train: TrainConfig::default(),
            lenet_train: TrainConfig { epochs: 60, ..TrainConfig::default() },
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
            sigma_c_sweep: vec![2.0],
        };
        cfg.derive_seeds();
        cfg
    }
}

/// Command-line values that override the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<TrajectoryMode>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        cfg.derive_seeds();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes") + "\n"
    }

    /// Reads `path` (or starts from defaults), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(mode) = overrides.mode {
            self.experiment.trajectory.mode = mode;
        }
        self.derive_seeds();
    }

    fn derive_seeds(&mut self) {
        self.lcnet_train.seed = rng::derive_seed(self.seed, "train-lcnet", 0);
        self.lenet_train.seed = rng::derive_seed(self.seed, "train-lenet", 0);
        self.experiment.seed = rng::derive_seed(self.seed, "experiment", 0);
    }

    /// Seed of a named sub-stream of the master seed.
    pub fn sub_seed(&self, label: &str) -> u64 {
        rng::derive_seed(self.seed, label, 0)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if let Some(p) = &self.scene {
            if !p.is_file() {
                return Err(CliError::Config(format!("scene file {} does not exist", p.display())));
            }
        }
        let d = &self.data;
        let sizes = [
            d.lcnet_train_locations,
            d.lcnet_train_speeds,
            d.lcnet_test_locations,
            d.lcnet_test_speeds,
            d.lenet_train_locations,
            d.lenet_test_locations,
            d.stats_locations,
            d.stats_draws,
            self.grid_per_side,
            self.eval.repeats,
        ];
        if sizes.contains(&0) {
            return bad("dataset sizes, grid density and repeat count must be positive");
        }
        if d.stats_locations * d.stats_draws < 2 {
            return bad("error statistics need at least two draws in total");
        }
        if self.grid_per_side < 2 {
            return bad("the label grid needs at least two points per side");
        }
        if self.eval.fractions.is_empty() || self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("training fractions must lie in (0, 1]");
        }
        if self.sigma_c_sweep.is_empty() || self.sigma_c_sweep.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma_c sweep must be non-empty and nonnegative");
        }
        let wrap = |e: ccmlab::Error| CliError::Config(e.to_string());
        self.array.validate().map_err(wrap)?;
        self.timing.validate().map_err(wrap)?;
        self.lcnet_train.validate().map_err(wrap)?;
        self.lenet_train.validate().map_err(wrap)?;
        self.experiment.validate().map_err(wrap)?;
        Ok(())
    }

    pub fn load_scene(&self) -> Result<Scene, CliError> {
        match &self.scene {
            Some(p) => Ok(Scene::load(p)?),
            None => Ok(Scene::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { seed: Some(5), out_dir: Some("x".into()), mode: Some(TrajectoryMode::Dynamic) });
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.experiment.trajectory.mode, TrajectoryMode::Dynamic);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "data": {"stats_draws": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.stats_draws, 3);
        assert_eq!(cfg.data.stats_locations, 9_000);
        assert_eq!(cfg.lcnet_train.seed, rng::derive_seed(9, "train-lcnet", 0));
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        cfg.apply(&Overrides { seed: Some(10), ..Default::default() });
        assert_eq!(cfg.seed, 10);
        assert_eq!(cfg.experiment.seed, rng::derive_seed(10, "experiment", 0));
    }

    #[test]
    fn invalid_documents_are_config_errors() {
        assert!(matches!(RunConfig::from_json("{"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"sead": 1}"#), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.data.stats_draws = 0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg = RunConfig { scene: Some("/nonexistent/scene.json".into()), ..RunConfig::default() };
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg = RunConfig::default();
        cfg.eval.fractions = vec![0.0];
        assert!(cfg.validate().is_err());
    }
}
