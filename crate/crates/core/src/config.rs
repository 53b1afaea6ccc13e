//! Configuration documents. Every struct rejects unknown keys and fills
//! missing ones with the documented defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::error::{Error, Result};
use crate::sampling::SamplingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean absolute difference over all map entries.
    L1,
    /// Mean over rows of `1 - cos(row_x, row_y)`.
    Cos,
}

/// Structure-loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SesimConfig {
    pub taps: Vec<String>,
    pub n_samples: usize,
    pub patch: usize,
    pub sampling: SamplingMode,
    pub metric: Metric,
    /// Weight of the structure term.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Negatives per query.
    pub k_negatives: usize,
    /// Negatives drawn from the augmented image; `None` means `ceil(K / 2)`.
    pub internal_negatives: Option<usize>,
    /// L2-normalize each position's feature vector before correlating.
    pub normalize_features: bool,
    pub seed: u64,
}

impl Default for SesimConfig {
    fn default() -> Self {
        Self {
            taps: vec!["tapA".into(), "tapB".into()],
            n_samples: 64,
            patch: 8,
            sampling: SamplingMode::PatchRandom,
            metric: Metric::Cos,
            lambda: 10.0,
            tau: 0.07,
            k_negatives: 255,
            internal_negatives: None,
            normalize_features: false,
            seed: 0,
        }
    }
}

impl SesimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be > 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.k_negatives == 0 || self.patch == 0 || self.n_samples == 0 {
            return Err(Error::Config("k_negatives, patch and n_samples must be >= 1".into()));
        }
        if self.internal_negatives.is_some_and(|n| n > self.k_negatives) {
            return Err(Error::Config("internal_negatives cannot exceed k_negatives".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("at least one tap is required".into()));
        }
        Ok(())
    }

    /// `(internal, external)` negative counts.
    pub fn negative_split(&self) -> (usize, usize) {
        let internal = self.internal_negatives.unwrap_or(self.k_negatives.div_ceil(2));
        (internal, self.k_negatives - internal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Trunk selection: seeded-random desk architecture or a weight manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub padding: crate::ops::Padding,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { weights: None, seed: 0, padding: crate::ops::Padding::Zero }
    }
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 64, count: 50, min_shapes: 2, max_shapes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Images used for training; the held-out set is generated from a disjoint seed stream.
    pub corpus: SynthConfig,
    pub heldout_count: usize,
    pub eval_triplets: usize,
    pub init_std: f64,
    pub optimizer: AdamConfig,
    pub log_every: usize,
    /// Query pool size and patch side of the contrastive batches; the
    /// sampling mode is `sesim.sampling`.
    pub n_samples: usize,
    pub patch: usize,
    /// Taps that receive selection layers.
    pub taps: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            corpus: SynthConfig { size: 128, count: 24, min_shapes: 2, max_shapes: 4 },
            heldout_count: 8,
            eval_triplets: 16,
            init_std: 0.01,
            optimizer: AdamConfig { lr: 3e-4, ..AdamConfig::default() },
            log_every: 1,
            n_samples: 256,
            patch: 8,
            taps: vec!["tapA".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.02 }
    }
}

/// Complete run configuration parsed from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sesim: SesimConfig,
    pub augment: AugmentSpec,
    pub extractor: ExtractorConfig,
    /// Optional learned selection layers (weight manifest) for LSeSim evaluation.
    pub selection: Option<PathBuf>,
    pub train: TrainConfig,
    pub stylize: StylizeConfig,
    pub synth: SynthConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sesim: SesimConfig::default(),
            augment: AugmentSpec::default(),
            extractor: ExtractorConfig::default(),
            selection: None,
            train: TrainConfig::default(),
            stylize: StylizeConfig::default(),
            synth: SynthConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.sesim.validate()?;
        self.augment.validate()?;
        if self.synth.min_shapes == 0 || self.synth.min_shapes > self.synth.max_shapes {
            return Err(Error::Config("synth shape counts must satisfy 1 <= min <= max".into()));
        }
        if self.train.taps.is_empty() || self.train.patch == 0 || self.train.n_samples == 0 {
            return Err(Error::Config("train needs at least one tap, patch >= 1 and n_samples >= 1".into()));
        }
        if !(self.train.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }

    /// Propagate the top-level seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sesim.seed = seed;
        self.augment.seed = seed;
        self
    }
}
