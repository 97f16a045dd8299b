//! End-to-end runs driven by a [`RunConfig`]: data, model, training, files.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use crate::adapter::{AdapterSet, AdapterSpec};
use crate::checkpoint::save_checkpoint;
use crate::config::{DataSource, Precision, RunConfig};
use crate::cost::{cost_csv, cost_table, CostReport};
use crate::data::{load_mnist_dir, synth_split, Dataset};
use crate::engine::{evaluate, init_adapters, run_training, Counters, Evaluation, RunData, TrainingOutcome, Variant};
use crate::error::{Error, Result};
use crate::metrics::{write_metrics, MetricRecord, RunMetadata};
use crate::model::{BaseModel, MNIST_CLASSES, MNIST_INPUTS};
use crate::router::CollaborationMode;
use crate::scalar::Scalar;
use crate::theory::{run_all, VerifyReport};

/// Method choices recorded in every metadata file.
const NOTES: &[&str] = &[
    "auxiliary loss is the mean over buffered samples",
    "adaptation records carry per-sample gradients (batch mean gradient times alpha times rows)",
    "a partial final buffer is flushed at the end of training",
    "wall_s is null unless train.wall_clock is set",
];

const POST_HOC_NOTE: &str = "test-merged rows merge every user's adapters with alpha = 1 after training";

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub metrics_path: PathBuf,
    pub history: Vec<MetricRecord>,
    pub final_eval: Vec<Evaluation>,
    /// Per-user accuracy after merging all users' adapters (alone mode).
    pub post_hoc_merged: Option<Vec<Evaluation>>,
    pub counters: Counters,
    pub iterations: usize,
    pub theta_hash: String,
    pub partial_flush: bool,
}

/// `(train, test)` per the `[data]` section.
pub fn load_datasets<T: Scalar>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let d = &cfg.data;
    let (mut train, mut test) = match d.source {
        DataSource::Mnist => load_mnist_dir::<T>(&d.dir)?,
        DataSource::Synthetic => synth_split::<T>(d.synth_spec(), d.test_fraction, d.seed)?,
    };
    if let Some(n) = d.train_limit {
        train = train.take(n)?;
    }
    if let Some(n) = d.test_limit {
        test = test.take(n)?;
    }
    Ok((train, test))
}

/// Input width and class count implied by `[data]` without reading files.
pub fn data_dims(cfg: &RunConfig) -> (usize, usize) {
    match cfg.data.source {
        DataSource::Mnist => (MNIST_INPUTS, MNIST_CLASSES),
        DataSource::Synthetic => (cfg.data.dims, cfg.data.classes),
    }
}

pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<BaseModel<T>> {
    let (i, c) = data_dims(cfg);
    BaseModel::preset(cfg.model.preset(i, c), cfg.model.seed)
}

fn metadata(cfg: &RunConfig, command: &str, model: &BaseModel<impl Scalar>, extra: &[&str]) -> Result<RunMetadata> {
    let (i, c) = data_dims(cfg);
    Ok(RunMetadata {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        precision: cfg.train.precision.name().into(),
        seeds: vec![cfg.data.seed, cfg.model.seed, cfg.adapter.seed, cfg.train.seed],
        model: format!("{} ({} params)", cfg.model.preset(i, c).describe(), model.param_count()),
        adapter: cfg.adapter.kind().name().into(),
        notes: NOTES.iter().chain(extra).map(|s| s.to_string()).collect(),
        config: serde_json::to_value(cfg)?,
    })
}

fn write_outputs<T: Scalar>(
    cfg: &RunConfig,
    command: &str,
    outcome: &TrainingOutcome<T>,
    history: &[MetricRecord],
    extra_notes: &[&str],
) -> Result<PathBuf> {
    let path = cfg.output.metrics_path();
    write_metrics(&path, history, &metadata(cfg, command, &outcome.model, extra_notes)?)?;
    if cfg.output.checkpoint && !outcome.adapters.is_empty() {
        save_checkpoint(&outcome.adapters, &cfg.output.dir.join("adapters.cola"))?;
    }
    if cfg.output.message_log {
        let mut text = String::new();
        for m in &outcome.message_log {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        fs::write(cfg.output.dir.join("messages.jsonl"), text)?;
    }
    Ok(path)
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let (train, test) = load_datasets::<T>(cfg)?;
    let model = build_model::<T>(cfg)?;
    let tc = cfg.training(1)?;
    let adapters = match tc.variant {
        Variant::FullFineTune => AdapterSet::new(),
        _ => init_adapters(&model, tc.adapter, 1, cfg.adapter.seed)?,
    };
    let data = RunData::single(&train, Some(&test));
    let outcome = run_training(&tc, model, adapters, &data)?;
    let path = write_outputs(cfg, "train", &outcome, &outcome.history, &[])?;
    Ok(RunSummary {
        command: "train".into(),
        metrics_path: path,
        history: outcome.history.clone(),
        final_eval: outcome.final_eval.clone(),
        post_hoc_merged: None,
        counters: outcome.counters,
        iterations: outcome.iterations,
        theta_hash: outcome.model.theta_hash(),
        partial_flush: outcome.partial_flush,
    })
}

fn ftaas_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let users = cfg.users.count;
    let mode = cfg.users.mode;
    let (train, test) = load_datasets::<T>(cfg)?;
    let shards: Vec<Dataset<T>> = (0..users).map(|k| train.shard(k, users)).collect::<Result<_>>()?;
    let tests: Vec<Dataset<T>> = (0..users).map(|k| test.shard(k, users)).collect::<Result<_>>()?;
    let model = build_model::<T>(cfg)?;
    let tc = cfg.training(users)?;
    if !tc.variant.offloads() {
        return Err(Error::Config(format!(
            "ftaas runs over the offload runtime; variant {} does not offload",
            tc.variant.name()
        )));
    }
    let sets = if mode == CollaborationMode::Joint { 1 } else { users };
    let adapters = init_adapters(&model, tc.adapter, sets, cfg.adapter.seed)?;
    let data = RunData {
        train: shards.iter().collect(),
        test: tests.iter().collect(),
        shared: mode == CollaborationMode::Joint,
    };
    let outcome = run_training(&tc, model, adapters, &data)?;

    let mut history = outcome.history.clone();
    let mut notes = Vec::new();
    let mut post_hoc = None;
    if mode == CollaborationMode::Alone && users > 1 && outcome.adapters.all_mergeable() {
        let evals = tests
            .iter()
            .enumerate()
            .map(|(k, d)| evaluate(&outcome.model, Some(&outcome.adapters), d, true, T::one(), Some(k)))
            .collect::<Result<Vec<_>>>()?;
        for (k, e) in evals.iter().enumerate() {
            history.push(MetricRecord {
                iter: outcome.iterations,
                epoch: history.last().map_or(0, |r| r.epoch),
                split: "test-merged".into(),
                loss: e.loss,
                accuracy: e.accuracy,
                wall_s: None,
                user: Some(k),
            });
        }
        notes.push(POST_HOC_NOTE);
        post_hoc = Some(evals);
    }
    let path = write_outputs(cfg, &format!("ftaas --mode {}", mode.name()), &outcome, &history, &notes)?;
    Ok(RunSummary {
        command: "ftaas".into(),
        metrics_path: path,
        history,
        final_eval: outcome.final_eval.clone(),
        post_hoc_merged: post_hoc,
        counters: outcome.counters,
        iterations: outcome.iterations,
        theta_hash: outcome.model.theta_hash(),
        partial_flush: outcome.partial_flush,
    })
}

/// Single-user training; writes metrics, metadata and a checkpoint.
pub fn run_train(cfg: &RunConfig) -> Result<RunSummary> {
    match cfg.train.precision {
        Precision::F64 => train_typed::<f64>(cfg),
        Precision::F32 => train_typed::<f32>(cfg),
    }
}

/// `users` users sharing one base model under `mode`.
pub fn run_ftaas(cfg: &RunConfig, users: usize, mode: CollaborationMode) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.users.count = users;
    cfg.users.mode = mode;
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F64 => ftaas_typed::<f64>(&cfg),
        Precision::F32 => ftaas_typed::<f32>(&cfg),
    }
}

pub fn run_verify(seed: u64) -> Result<VerifyReport> {
    run_all(seed)
}

/// The cost table for the configured model, adapter kind, users and batch.
pub fn run_cost(cfg: &RunConfig) -> Result<Vec<CostReport>> {
    let model = build_model::<f64>(cfg)?;
    let kind = cfg.adapter.kind();
    let specs = (0..model.tunable_count())
        .map(|m| {
            let (i, o) = model.tunable_dims(m)?;
            AdapterSpec::new(kind, i, o)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = cost_table(&model, &specs, cfg.users.count, cfg.train.batch_size)?;
    if cfg.output.cost_csv {
        fs::create_dir_all(&cfg.output.dir)?;
        fs::write(cfg.output.dir.join("cost.csv"), cost_csv(&reports))?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &std::path::Path) -> RunConfig {
        RunConfig::from_toml(&format!(
            r#"
            [data]
            classes = 3
            per_class = 30
            dims = 8
            [adapter]
            kind = "linear"
            [train]
            optimizer = "sgd"
            schedule = "cosine"
            lr = 0.1
            epochs = 2
            batch_size = 8
            [output]
            dir = "{}"
            "#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn train_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_train(&cfg(dir.path())).unwrap();
        assert!(s.metrics_path.exists());
        assert!(dir.path().join("metrics.meta.json").exists());
        assert!(dir.path().join("adapters.cola").exists());
        assert_eq!(s.counters.backward, s.iterations);
        assert_eq!(s.theta_hash, build_model::<f64>(&cfg(dir.path())).unwrap().theta_hash());
    }

    #[test]
    fn alone_mode_reports_post_hoc_merge() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_ftaas(&cfg(dir.path()), 3, CollaborationMode::Alone).unwrap();
        assert_eq!(s.counters.merges, 0);
        assert_eq!(s.final_eval.len(), 3);
        assert_eq!(s.post_hoc_merged.as_ref().unwrap().len(), 3);
        assert!(s.history.iter().any(|r| r.split == "test-merged" && r.user == Some(2)));
    }

    #[test]
    fn collaboration_merges_once_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_ftaas(&cfg(dir.path()), 2, CollaborationMode::Collaboration).unwrap();
        assert_eq!(s.counters.merges, s.iterations);
        assert_eq!(s.counters.unmerges, s.iterations);
        assert_eq!(s.counters.backward, s.iterations);
    }

    #[test]
    fn cost_uses_configured_dims() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path());
        c.output.cost_csv = true;
        let r = run_cost(&c).unwrap();
        assert_eq!(r.len(), 10);
        assert!(dir.path().join("cost.csv").exists());
    }

    #[test]
    fn full_fine_tuning_has_no_adapters() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path());
        c.train.variant = Variant::FullFineTune;
        let s = run_train(&c).unwrap();
        assert!(!dir.path().join("adapters.cola").exists());
        assert_ne!(s.theta_hash, build_model::<f64>(&c).unwrap().theta_hash());
    }
}
