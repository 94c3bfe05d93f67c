//! JSON run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use gapfill::benchmark::Benchmark;
use gapfill::dineof::DineofConfig;
use gapfill::direct_net::DirectNetConfig;
use gapfill::obs_sim::mix_seed;
use gapfill::training::TrainConfig;
use gapfill::var_solver::{
    ConvNetPrior, ConvNetShape, PriorModel, SolverSpec, UpdateRule, VariationalModel,
};
use gapfill::Transform;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "GAPFILL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Dineof,
    #[default]
    Variational,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Zero,
    Diffusion,
    #[default]
    Convnet,
}

/// Prior and learned-solver settings of the variational family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationalConfig {
    pub prior: PriorKind,
    /// Diffusion coefficient of the diffusion prior.
    pub nu: f64,
    pub shape: ConvNetShape,
    /// Unrolled solver iterations.
    pub iterations: usize,
    pub alpha: f64,
    /// Channels of the recurrent update cell.
    pub hidden: usize,
    pub normalize_grad: bool,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            prior: PriorKind::Convnet,
            nu: 0.15,
            shape: ConvNetShape::default(),
            iterations: 5,
            alpha: 0.1,
            hidden: 4,
            normalize_grad: true,
        }
    }
}

impl VariationalConfig {
    pub fn build(&self, seed: u64) -> Result<VariationalModel> {
        let prior = match self.prior {
            PriorKind::Zero => PriorModel::Zero,
            PriorKind::Diffusion => PriorModel::Diffusion { nu: self.nu },
            PriorKind::Convnet => {
                let s = self.shape;
                if s.channels == 0 || s.kt % 2 == 0 || s.k % 2 == 0 {
                    return Err(CliError::Config(format!(
                        "convnet prior needs channels > 0 and odd kernel extents, got {s:?}"
                    )));
                }
                PriorModel::ConvNet(ConvNetPrior::new(s, mix_seed(seed, 1)))
            }
        };
        if self.hidden == 0 || self.iterations == 0 {
            return Err(CliError::Config(
                "solver iterations and hidden channels must be positive".into(),
            ));
        }
        let mut solver = SolverSpec::learned(self.iterations, self.alpha, self.hidden, mix_seed(seed, 2));
        if let UpdateRule::Learned(l) = &mut solver.update {
            l.normalize_grad = self.normalize_grad;
        }
        Ok(VariationalModel::new(prior, solver)?)
    }
}

/// Iterative EOF settings; `modes` absent means cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DineofSettings {
    #[serde(flatten)]
    pub config: DineofConfig,
    pub modes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Synthetic truth, cloud masks and the train/valid/test periods.
    pub dataset: Benchmark,
    /// Observation file `train` reads when no path is passed.
    pub data: Option<PathBuf>,
    pub transform: Transform,
    pub family: Family,
    pub variational: VariationalConfig,
    pub direct: DirectNetConfig,
    pub dineof: DineofSettings,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: Benchmark::default(),
            data: None,
            transform: Transform::Log10,
            family: Family::Variational,
            variational: VariationalConfig::default(),
            direct: DirectNetConfig::default(),
            dineof: DineofSettings::default(),
            train: TrainConfig {
                epochs: 20,
                crop: Some((16, 16)),
                ..TrainConfig::default()
            },
            output_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The file at `path`, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Distributes one run seed over every seeded component: the dataset
    /// follows [`Benchmark::standard`], model and training streams are mixed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dataset.truth.seed = seed;
        self.dataset.clouds.seed = seed.wrapping_add(1);
        self.dataset.obs_seed = seed.wrapping_add(2);
        self.train.seed = mix_seed(seed, 3);
        self.direct.seed = mix_seed(seed, 4);
        self.dineof.config.seed = mix_seed(seed, 5);
    }

    /// Seed to use: the flag, then the config, then `GAPFILL_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    /// Resolves and applies the seed in one step.
    pub fn seeded(mut self, flag: Option<u64>) -> Result<Self> {
        let seed = self.resolve_seed(flag)?;
        self.apply_seed(seed);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig =
            serde_json::from_str(r#"{"family": "direct", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.family, Family::Direct);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(partial.dataset, Benchmark::default());
    }

    #[test]
    fn seed_matches_the_benchmark_layout() {
        let cfg = RunConfig::default().seeded(Some(7)).unwrap();
        let b = Benchmark::standard(7);
        assert_eq!(cfg.dataset, b);
    }

    #[test]
    fn flag_beats_config_seed() {
        let cfg = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(cfg.resolve_seed(None).unwrap(), 3);
    }

    #[test]
    fn bad_prior_shape_is_a_config_error() {
        let mut v = VariationalConfig::default();
        v.shape.k = 2;
        assert!(matches!(v.build(0), Err(CliError::Config(_))));
    }
}
