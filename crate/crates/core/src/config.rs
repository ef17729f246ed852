//! Versioned TOML run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmki::DistillWeights;
use crate::error::{Error, IoContext, Result};
use crate::model::Mode;
use crate::scene::WorldSpec;
use crate::voxelizer::GridSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Keys that must be present in every config file.
pub const REQUIRED_KEYS: [&str; 4] = ["schema_version", "seed", "dataset.n_scenes", "train.epochs"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub grid: GridConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub voxel_size: [f64; 3],
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { voxel_size: [1.0; 3], channels: 8 }
    }
}

/// `[train]` table. `lambda` overrides `lambda_profile` when given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    pub detach_fusion: bool,
    pub lambda_profile: String,
    pub lambda: Option<[f64; 3]>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: Mode::PromptDet,
            detach_fusion: true,
            lambda_profile: "a".into(),
            lambda: None,
            epochs: 20,
            batch_size: 4,
            lr: 2e-3,
            lr_decay_epochs: vec![16],
            lr_decay_factor: 0.1,
            weight_decay: 1e-2,
            grad_clip: 10.0,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub max_dets: usize,
    /// Center-distance thresholds in meters, ascending.
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_thresh: 0.05, max_dets: 50, thresholds: vec![0.25, 0.5, 1.0, 2.0] }
    }
}

impl Config {
    /// The default toy benchmark: 250 scenes, 200 train and 50 val.
    pub fn toy() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset: DatasetConfig { n_scenes: 250 },
            world: WorldSpec::default(),
            grid: GridConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for key in REQUIRED_KEYS {
            let mut node = Some(&value);
            let mut parts = key.split('.').peekable();
            let mut found = false;
            while let Some(part) = parts.next() {
                match node.and_then(|t| t.get(part)) {
                    Some(toml::Value::Table(t)) if parts.peek().is_some() => node = Some(t),
                    Some(_) if parts.peek().is_none() => found = true,
                    _ => break,
                }
            }
            if !found {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if self.dataset.n_scenes == 0 {
            return Err(Error::Config("dataset.n_scenes must be positive".into()));
        }
        self.world.validate()?;
        self.grid_spec()?;
        self.train_config()?;
        let e = &self.eval;
        if e.thresholds.is_empty() || e.thresholds.windows(2).any(|w| w[0] >= w[1]) || e.thresholds[0] <= 0.0 {
            return Err(Error::Config("eval.thresholds must be positive and strictly ascending".into()));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::from_world(&self.world, self.grid.voxel_size, self.grid.channels)
    }

    pub fn weights(&self) -> Result<DistillWeights> {
        let w = match self.train.lambda {
            Some([fea, rel, resp]) => DistillWeights { fea, rel, resp },
            None => DistillWeights::profile(&self.train.lambda_profile)
                .ok_or_else(|| Error::Config(format!("unknown lambda_profile `{}` (a, b, c)", self.train.lambda_profile)))?,
        };
        w.validate()?;
        Ok(w)
    }

    /// Resolved training configuration.
    pub fn train_config(&self) -> Result<crate::trainer::TrainConfig> {
        let t = &self.train;
        let mut weights = self.weights()?;
        if t.mode != Mode::PromptDet {
            if t.lambda.is_some_and(|l| l.iter().any(|&v| v != 0.0)) {
                return Err(Error::Config(format!("mode {} has no distillation; lambda must be zero", t.mode.name())));
            }
            weights = DistillWeights::ZERO;
        }
        let cfg = crate::trainer::TrainConfig {
            world: self.world.clone(),
            grid: self.grid_spec()?,
            weights,
            mode: t.mode,
            detach_fusion: t.detach_fusion,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay_epochs: t.lr_decay_epochs.clone(),
            lr_decay_factor: t.lr_decay_factor,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: self.seed,
            augment: t.augment,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\nseed = 3\n[dataset]\nn_scenes = 10\n[train]\nepochs = 2\n";

    #[test]
    fn shipped_toy_config_is_the_default() {
        let text = include_str!("../../../configs/toy.toml");
        assert_eq!(Config::parse(text).unwrap(), Config::toy());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = Config::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.weights().unwrap(), DistillWeights { fea: 1.1, rel: 8.0, resp: 2.0 });
        assert_eq!(c.eval.thresholds, vec![0.25, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn missing_key_is_named() {
        for key in REQUIRED_KEYS {
            let leaf = key.rsplit('.').next().unwrap();
            let text: String = MINIMAL.lines().filter(|l| !l.starts_with(&format!("{leaf} ="))).map(|l| format!("{l}\n")).collect();
            let err = Config::parse(&text).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn roundtrip_through_toml() {
        let c = Config::toy();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn contradictions_are_rejected() {
        let text = format!("{MINIMAL}mode = \"fusion_only\"\nlambda = [1.0, 0.0, 0.0]\n");
        assert!(matches!(Config::parse(&text), Err(Error::Config(_))));
        let text = format!("{MINIMAL}lambda_profile = \"z\"\n");
        assert!(Config::parse(&text).is_err());
        assert!(Config::parse(&MINIMAL.replace("schema_version = 1", "schema_version = 9")).is_err());
        assert!(Config::parse(&format!("{MINIMAL}bogus = 1\n")).is_err());
    }

    #[test]
    fn profiles_match_table() {
        let b = DistillWeights::profile("b").unwrap();
        let c = DistillWeights::profile("c").unwrap();
        assert_eq!((b.fea, b.rel, b.resp), (1.5, 10.0, 2.5));
        assert_eq!((c.fea, c.rel, c.resp), (8.0, 25.0, 10.0));
    }
}
