//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::GroupLossConfig;
use crate::data::{BatchGeometry, DEFAULT_BLOB_SPREAD};
use crate::error::{Error, Result};
use crate::model::{Architecture, LrSchedule};

/// Where the samples come from: a CSV file, or the Gaussian blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    /// Train on the first `train_classes` classes and test on the rest.
    pub zero_shot: bool,
    pub train_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            num_classes: 20,
            per_class: 50,
            d_in: 32,
            spread: DEFAULT_BLOB_SPREAD,
            zero_shot: true,
            train_classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    /// Leading epochs trained as a plain classifier (no refinement, no anchors).
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Batches per epoch; 0 means one pass worth of samples over the train split.
    pub batches_per_epoch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            decay_epoch: Some(30),
            decay_factor: 0.1,
            epochs: 60,
            warmup_epochs: 0,
            weight_decay: 0.0,
            batches_per_epoch: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr: self.lr,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Defaults to the number of classes in the evaluated split.
    pub k_clusters: Option<usize>,
    /// Evaluate on the test split every this many epochs; 0 only at the end.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            k_clusters: None,
            every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub batch: BatchGeometry,
    pub dynamics: GroupLossConfig,
    pub model: Architecture,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            batch: BatchGeometry::default(),
            dynamics: GroupLossConfig::default(),
            model: Architecture::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Independent seeds derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub sampler: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(root);
        Self {
            data: rng.random(),
            model: rng.random(),
            sampler: rng.random(),
            eval: rng.random(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always representable as TOML")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }

    /// Checks every setting before any work starts.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.batch.validate().map_err(wrap)?;
        self.dynamics.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;

        let d = &self.data;
        if d.path.is_none() {
            if d.num_classes == 0 || d.per_class == 0 || d.d_in == 0 {
                return Err(Error::Config(
                    "blob num_classes, per_class and d_in must be positive".into(),
                ));
            }
            if !(d.spread >= 0.0 && d.spread.is_finite()) {
                return Err(Error::Config(format!(
                    "blob spread must be non-negative, got {}",
                    d.spread
                )));
            }
            if d.per_class < self.batch.samples_per_class {
                return Err(Error::Config(format!(
                    "per_class ({}) is below samples_per_class ({})",
                    d.per_class, self.batch.samples_per_class
                )));
            }
            if d.zero_shot && d.train_classes >= d.num_classes {
                return Err(Error::Config(format!(
                    "train_classes ({}) must leave at least one of {} classes for testing",
                    d.train_classes, d.num_classes
                )));
            }
            let train = if d.zero_shot {
                d.train_classes
            } else {
                d.num_classes
            };
            if train < self.batch.classes_per_batch {
                return Err(Error::Config(format!(
                    "{train} training classes cannot fill {} classes per batch",
                    self.batch.classes_per_batch
                )));
            }
        }
        if d.zero_shot && d.train_classes == 0 {
            return Err(Error::Config("train_classes must be positive".into()));
        }

        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                o.lr
            )));
        }
        if !(o.decay_factor > 0.0 && o.decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "decay_factor must be positive, got {}",
                o.decay_factor
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                o.weight_decay
            )));
        }
        if o.warmup_epochs > o.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                o.warmup_epochs, o.epochs
            )));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config(
                "eval.ks must be a non-empty list of positive integers".into(),
            ));
        }
        if self.eval.k_clusters == Some(0) {
            return Err(Error::Config("eval.k_clusters must be positive".into()));
        }
        Ok(())
    }
}
