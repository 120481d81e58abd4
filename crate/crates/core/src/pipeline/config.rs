//! Experiment configuration: everything a training run depends on, loadable
//! from a TOML document whose keys map one-to-one onto these structs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::BackboneSpec;
use crate::losses::{ContextualParams, LossWeights, PixelSpace};
use crate::networks::GeneratorConfig;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }
}

/// Where training and evaluation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedural faces generated on the fly.
    Toy {
        train_samples: usize,
        test_samples: usize,
        seed: u64,
    },
    /// A dataset directory, raw or produced by `prepare-data`.
    CelebamaskHq {
        root: PathBuf,
        #[serde(default = "default_test_size")]
        test_size: usize,
    },
}

fn default_test_size() -> usize {
    super::data::DEFAULT_TEST_SIZE
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Toy {
            train_samples: 16,
            test_samples: 8,
            seed: 7,
        }
    }
}

/// Training-run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub image_size: usize,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    /// Allowed numbers of components removed per training sample, drawn uniformly.
    pub component_counts: Vec<usize>,
    /// Square dilation radius applied to component masks, in pixels.
    pub dilation_radius: usize,
    pub contextual: ContextualParams,
    pub pixel_space: PixelSpace,
    pub backbone: BackboneSpec,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 4,
            image_size: 32,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            component_counts: vec![2, 3],
            dilation_radius: 1,
            contextual: ContextualParams::default(),
            pixel_space: PixelSpace::default(),
            backbone: BackboneSpec::random_cnn(0),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.component_counts.is_empty() || self.component_counts.iter().any(|c| !(1..=3).contains(c)) {
            return Err(Error::Config(format!(
                "component_counts must be a non-empty subset of 1..=3, got {:?}",
                self.component_counts
            )));
        }
        if !(self.contextual.bandwidth > 0.0 && self.contextual.eps > 0.0) {
            return Err(Error::Config("contextual bandwidth and eps must be positive".into()));
        }
        Ok(())
    }
}

/// A full experiment: generator architecture plus training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// 32x32 synthetic-face defaults.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.generator.image_size != self.train.image_size {
            return Err(Error::Config(format!(
                "generator.image_size {} differs from train.image_size {}",
                self.generator.image_size, self.train.image_size
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data and weight paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        if let DataConfig::CelebamaskHq { root, .. } = &mut self.train.data {
            if root.is_relative() {
                *root = base.join(&*root);
            }
        }
        if let Some(w) = &mut self.train.backbone.weights {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
    }

    /// This configuration with one mechanism switched off.
    pub fn ablated(&self, ablation: Ablation) -> Self {
        let mut cfg = self.clone();
        match ablation {
            Ablation::Full => {}
            Ablation::NoAttention => cfg.generator.attention = false,
            Ablation::NoContextual => cfg.train.weights.contextual = 0.0,
            Ablation::NoStyle => cfg.train.weights.style = 0.0,
            Ablation::NoPerceptual => cfg.train.weights.perceptual = 0.0,
        }
        cfg
    }
}

/// The comparison rows of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoAttention,
    NoContextual,
    NoStyle,
    NoPerceptual,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoAttention,
        Ablation::NoContextual,
        Ablation::NoStyle,
        Ablation::NoPerceptual,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "r-FACE (full)",
            Ablation::NoAttention => "w/o attention",
            Ablation::NoContextual => "w/o contextual loss",
            Ablation::NoStyle => "w/o style loss",
            Ablation::NoPerceptual => "w/o perceptual loss",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAttention => "no-attention",
            Ablation::NoContextual => "no-contextual",
            Ablation::NoStyle => "no-style",
            Ablation::NoPerceptual => "no-perceptual",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.key() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}; expected one of full, no-attention, no-contextual, no-style, no-perceptual")))
    }
}

/// An ablation grid file: a base experiment and the variants to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    /// Path of the base experiment config, relative to the grid file.
    pub config: PathBuf,
    #[serde(default = "all_ablations")]
    pub variants: Vec<Ablation>,
}

fn all_ablations() -> Vec<Ablation> {
    Ablation::ALL.to_vec()
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<(Self, ExperimentConfig)> {
        let text = std::fs::read_to_string(path)?;
        let grid: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg_path = if grid.config.is_relative() { base.join(&grid.config) } else { grid.config.clone() };
        let cfg = ExperimentConfig::load(&cfg_path)?;
        Ok((grid, cfg))
    }
}
