//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! overlaid by command-line flags.

use std::path::{Path, PathBuf};

use acdnet_core::ehr::GenConfig;
use acdnet_core::model::Variant;
use acdnet_core::patient_encoder::EncoderConfig;
use acdnet_core::train_eval::{BootstrapConfig, StepSchedule, TrainConfig};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub schedule: StepSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            lr: t.lr,
            epochs: t.epochs,
            schedule: t.schedule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rounds: usize,
    pub fraction: f64,
    /// Score at or above which a medicine is recommended.
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        Self {
            rounds: b.rounds,
            fraction: b.fraction,
            threshold: TrainConfig::default().threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds generation, the split, initialisation, dropout and bootstrap.
    pub seed: u64,
    /// Model variant trained by `train`.
    pub variant: Variant,
    /// Train/validation/test proportions.
    pub split: [usize; 3],
    pub paths: Paths,
    pub generator: GenConfig,
    pub encoder: EncoderConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    /// Variants compared by `ablate`; empty means all of them.
    pub ablation: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Full,
            split: [4, 1, 1],
            paths: Paths::default(),
            generator: GenConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablation: Vec::new(),
        }
    }
}

/// Flag values; `None` leaves the lower layer in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub rounds: Option<usize>,
    pub fraction: Option<f64>,
    pub threshold: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub no_positional_encoding: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, then `file`, then `flags`; validated.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut self.seed, &o.seed);
        if o.dataset.is_some() {
            self.paths.dataset.clone_from(&o.dataset);
        }
        if o.checkpoint.is_some() {
            self.paths.checkpoint.clone_from(&o.checkpoint);
        }
        if o.out.is_some() {
            self.paths.out.clone_from(&o.out);
        }
        if !o.variants.is_empty() {
            self.variant = o.variants[0];
            self.ablation.clone_from(&o.variants);
        }
        set(&mut self.eval.rounds, &o.rounds);
        set(&mut self.eval.fraction, &o.fraction);
        set(&mut self.eval.threshold, &o.threshold);
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.lr, &o.lr);
        set(&mut self.train.lambda, &o.lambda);
        set(&mut self.encoder.dim, &o.dim);
        set(&mut self.encoder.heads, &o.heads);
        set(&mut self.encoder.layers, &o.layers);
        if o.no_positional_encoding {
            self.encoder.positional_encoding = false;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.train_config().validate()?;
        self.bootstrap().validate()?;
        if self.split.contains(&0) {
            bail!("split proportions must be positive, got {:?}", self.split);
        }
        if self.train.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.train.lambda,
            lr: self.train.lr,
            epochs: self.train.epochs,
            seed: self.seed,
            threshold: self.eval.threshold,
            schedule: self.train.schedule,
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            rounds: self.eval.rounds,
            fraction: self.eval.fraction,
            seed: self.seed,
        }
    }

    pub fn ablation_variants(&self) -> Vec<Variant> {
        if self.ablation.is_empty() {
            Variant::ALL.to_vec()
        } else {
            self.ablation.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }
}
