//! Run configuration in TOML.
//!
//! ```toml
//! [data]
//! source = "synthetic"     # or "mnist" (reads IDX files under `dir`)
//! classes = 4
//! per_class = 200
//! dims = 16
//! separation = 3.0
//!
//! [model]
//! preset = "linear"        # or "mlp" (two ReLU hidden layers of `width`)
//!
//! [adapter]
//! kind = "lowrank"         # "linear", "mlp"
//! rank = 8
//!
//! [train]
//! variant = "merged"       # "unmerged", "detached", "classical", "ft"
//! optimizer = "sgd"
//! schedule = "cosine"
//! lr = 0.1
//! epochs = 5
//!
//! [offload]
//! workers = 2
//!
//! [output]
//! dir = "runs/demo"
//!
//! [users]
//! count = 1
//! mode = "joint"           # "alone", "collab"
//! ```
//!
//! Every key is optional. `COLA_THREADS` caps `offload.workers`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterKind;
use crate::data::SynthSpec;
use crate::engine::{TrainingConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{Preset, DEFAULT_MLP_WIDTH};
use crate::offload::{OffloadConfig, OffloadMode};
use crate::optim::{LrSchedule, OptimizerSpec};
use crate::router::CollaborationMode;

pub const THREADS_ENV: &str = "COLA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub dir: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub separation: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Keep only the first `train_limit` training rows.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            dir: PathBuf::from("data/mnist"),
            classes: 4,
            per_class: 200,
            dims: 16,
            separation: 3.0,
            test_fraction: 0.25,
            seed: 0,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DataSection {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            per_class: self.per_class,
            dims: self.dims,
            separation: self.separation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: PresetName,
    pub width: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: PresetName::Linear,
            width: DEFAULT_MLP_WIDTH,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn preset(&self, inputs: usize, classes: usize) -> Preset {
        match self.preset {
            PresetName::Linear => Preset::Linear { inputs, classes },
            PresetName::Mlp => Preset::Mlp {
                inputs,
                width: self.width,
                classes,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdapterName {
    #[default]
    Lowrank,
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: AdapterName,
    pub rank: usize,
    pub scale: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            kind: AdapterName::Lowrank,
            rank: 8,
            scale: 1.0,
            hidden: 128,
            seed: 0,
        }
    }
}

impl AdapterSection {
    pub fn kind(&self) -> AdapterKind {
        match self.kind {
            AdapterName::Lowrank => AdapterKind::LowRank {
                rank: self.rank,
                scale: self.scale,
            },
            AdapterName::Linear => AdapterKind::Linear,
            AdapterName::Mlp => AdapterKind::Mlp { hidden: self.hidden },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Constant,
    Cosine,
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations: Option<usize>,
    pub lr: f64,
    pub schedule: ScheduleName,
    pub warmup: f64,
    pub interval: usize,
    pub inner_steps: usize,
    pub alpha: f64,
    pub optimizer: OptimizerName,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub precision: Precision,
    pub wall_clock: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            variant: Variant::Merged,
            batch_size: 32,
            epochs: 5,
            iterations: None,
            lr: 3e-4,
            schedule: ScheduleName::Linear,
            warmup: 0.05,
            interval: 1,
            inner_steps: 1,
            alpha: 1.0,
            optimizer: OptimizerName::Adamw,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 1,
            precision: Precision::F64,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffloadSection {
    pub workers: usize,
    pub mode: OffloadMode,
    pub timeout_ms: u64,
}

impl Default for OffloadSection {
    fn default() -> Self {
        let d = OffloadConfig::default();
        OffloadSection {
            workers: d.workers,
            mode: d.mode,
            timeout_ms: d.timeout_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub metrics: String,
    pub checkpoint: bool,
    pub message_log: bool,
    /// Also write the cost table as CSV.
    pub cost_csv: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            metrics: "metrics.jsonl".into(),
            checkpoint: true,
            message_log: false,
            cost_csv: false,
        }
    }
}

impl OutputSection {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsersSection {
    pub count: usize,
    pub mode: CollaborationMode,
}

impl Default for UsersSection {
    fn default() -> Self {
        UsersSection {
            count: 1,
            mode: CollaborationMode::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub offload: OffloadSection,
    pub output: OutputSection,
    pub users: UsersSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path`; relative data and output paths resolve against the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.count == 0 {
            return Err(Error::Config("users.count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must be in [0, 1)".into()));
        }
        self.training(self.users.count)?.validate()
    }

    pub fn optimizer(&self) -> OptimizerSpec {
        let t = &self.train;
        match t.optimizer {
            OptimizerName::Sgd => OptimizerSpec::Sgd,
            OptimizerName::Adamw => OptimizerSpec::AdamW {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.train.schedule {
            ScheduleName::Constant => LrSchedule::Constant,
            ScheduleName::Cosine => LrSchedule::Cosine,
            ScheduleName::Linear => LrSchedule::Linear {
                warmup: self.train.warmup,
            },
        }
    }

    /// Worker count after applying the `COLA_THREADS` cap.
    pub fn workers(&self) -> Result<usize> {
        let cap = match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
            ),
            Err(_) => None,
        };
        Ok(cap.map_or(self.offload.workers, |c| self.offload.workers.min(c)))
    }

    /// Engine settings with the variant forced by a collaboration mode when
    /// running `users` users.
    pub fn training(&self, users: usize) -> Result<TrainingConfig> {
        let t = &self.train;
        let variant = match (self.users.mode, users > 1) {
            (CollaborationMode::Alone, true) => Variant::Unmerged,
            (CollaborationMode::Collaboration, _) => Variant::Merged,
            _ => t.variant,
        };
        Ok(TrainingConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            iterations: t.iterations,
            lr: t.lr,
            schedule: self.schedule(),
            interval: t.interval,
            inner_steps: t.inner_steps,
            variant,
            adapter: self.adapter.kind(),
            alpha: t.alpha,
            optimizer: self.optimizer(),
            seed: t.seed,
            offload: OffloadConfig {
                workers: self.workers()?,
                mode: self.offload.mode,
                timeout_ms: self.offload.timeout_ms,
            },
            eval_every: t.eval_every,
            wall_clock: t.wall_clock,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            [data]
            source = "mnist"
            dir = "/tmp/m"
            [model]
            preset = "mlp"
            width = 64
            [adapter]
            kind = "linear"
            [train]
            variant = "ft"
            optimizer = "sgd"
            schedule = "cosine"
            lr = 0.05
            precision = "f32"
            [offload]
            workers = 3
            mode = "concurrent"
            [users]
            count = 4
            mode = "collab"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.source, DataSource::Mnist);
        assert_eq!(cfg.model.preset(784, 10).layers().len(), 5);
        assert_eq!(cfg.adapter.kind(), AdapterKind::Linear);
        assert_eq!(cfg.train.variant, Variant::FullFineTune);
        assert_eq!(cfg.optimizer(), OptimizerSpec::Sgd);
        assert_eq!(cfg.train.precision, Precision::F32);
        assert_eq!(cfg.offload.mode, OffloadMode::Concurrent);
        assert_eq!(cfg.users.mode, CollaborationMode::Collaboration);
        assert_eq!(cfg.training(4).unwrap().variant, Variant::Merged);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "[train]\nlearning_rate = 0.1",
            "[nonsense]\nx = 1",
            "[train]\nbatch_size = 0",
            "[train]\nvariant = \"sideways\"",
            "[users]\ncount = 0",
            "[adapter]\nkind = \"mlp\"\n[train]\nvariant = \"merged\"",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_)) | Err(Error::NotMergeable { .. })), "{text}");
        }
    }

    #[test]
    fn alone_mode_never_merges() {
        let cfg = RunConfig::from_toml("[users]\ncount = 3\nmode = \"alone\"").unwrap();
        assert_eq!(cfg.training(3).unwrap().variant, Variant::Unmerged);
        assert_eq!(cfg.training(1).unwrap().variant, Variant::Merged);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
