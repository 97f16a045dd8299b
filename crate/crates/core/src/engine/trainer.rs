use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterKey, AdapterKind, AdapterSet, AdapterSpec};
use crate::data::{batches, epoch_order, Dataset};
use crate::engine::AdaptationRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::model::{count_correct, AdapterPath, AffineParams, BaseModel, ForwardSpec};
use crate::offload::{spawn_offload, MessageLog, OffloadConfig, OffloadHandle, ShutdownReport};
use crate::optim::{LrSchedule, OptimizerSpec, OptimizerState};
use crate::router::{merge_all, route_forward, split_records, unmerge_all, RoutedBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Adapter outputs enter the base graph as constants.
    Detached,
    /// Adapters run inside the base graph without parameter gradients.
    Unmerged,
    /// Adapters are folded into the base weights for the base pass.
    Merged,
    /// Ordinary backprop into the adapter parameters on the base device.
    Classical,
    /// Ordinary backprop into the base parameters; no adapters.
    #[serde(rename = "ft")]
    FullFineTune,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Detached => "detached",
            Variant::Unmerged => "unmerged",
            Variant::Merged => "merged",
            Variant::Classical => "classical",
            Variant::FullFineTune => "ft",
        }
    }

    /// Whether adapter updates are learned from offloaded records.
    pub fn offloads(&self) -> bool {
        matches!(self, Variant::Detached | Variant::Unmerged | Variant::Merged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed iteration count; overrides `epochs` when set.
    pub iterations: Option<usize>,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Adaptation interval `I`: base iterations per adapter update.
    pub interval: usize,
    /// Optimizer steps per adapter update.
    pub inner_steps: usize,
    pub variant: Variant,
    pub adapter: AdapterKind,
    pub alpha: f64,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub offload: OffloadConfig,
    /// Evaluate every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub wall_clock: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            epochs: 1,
            iterations: None,
            lr: 3e-4,
            schedule: LrSchedule::Linear { warmup: 0.05 },
            interval: 1,
            inner_steps: 1,
            variant: Variant::Unmerged,
            adapter: AdapterKind::low_rank(),
            alpha: 1.0,
            optimizer: OptimizerSpec::default(),
            seed: 0,
            offload: OffloadConfig::default(),
            eval_every: 1,
            wall_clock: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.interval == 0 {
            return Err(Error::Config("adaptation interval must be at least 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if self.iterations.is_none() && self.epochs == 0 {
            return Err(Error::Config("need epochs or iterations".into()));
        }
        if self.offload.workers == 0 {
            return Err(Error::Config("offload needs at least one worker".into()));
        }
        if self.variant == Variant::Merged && !self.adapter.mergeable() {
            return Err(Error::NotMergeable {
                kind: self.adapter.name(),
            });
        }
        Ok(())
    }
}

/// Fresh zero-output adapters for every fine-tunable layer and user.
pub fn init_adapters<T: Scalar>(
    model: &BaseModel<T>,
    kind: AdapterKind,
    users: usize,
    seed: u64,
) -> Result<AdapterSet<T>> {
    let mut set = AdapterSet::new();
    for m in 0..model.tunable_count() {
        let (i, o) = model.tunable_dims(m)?;
        for k in 0..users {
            let spec = AdapterSpec::new(kind, i, o)?;
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((m as u64) << 32 | k as u64);
            set.insert(AdapterKey::new(m, k), Adapter::init(spec, s)?);
        }
    }
    Ok(set)
}

/// Work done on the base device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub forward: usize,
    pub backward: usize,
    pub merges: usize,
    pub unmerges: usize,
    pub flushes: usize,
    pub records: usize,
}

/// The base-device half of an iteration.
#[derive(Debug, Clone)]
pub struct BasePass<T> {
    pub loss: T,
    pub correct: usize,
    pub records: Vec<AdaptationRecord<T>>,
}

/// One forward and one backward of the frozen base with taps at every
/// fine-tunable layer, returning per-`(m, k)` records whose gradients are
/// per-sample gradients of the adapter outputs.
pub fn base_pass<T: Scalar>(
    model: &BaseModel<T>,
    adapters: &mut AdapterSet<T>,
    batch: &RoutedBatch<T>,
    variant: Variant,
    alpha: T,
    iteration: usize,
    counters: &mut Counters,
) -> Result<BasePass<T>> {
    if !model.is_frozen() {
        return Err(Error::ModelNotFrozen);
    }
    let mut pass = match variant {
        Variant::Merged => {
            let merged = merge_all(model, adapters, alpha)?;
            counters.merges += 1;
            let spec = ForwardSpec {
                weights: Some(&merged),
                owners: Some(&batch.owners),
                taps: true,
                ..ForwardSpec::plain()
            };
            let pass = model.forward_on_tape(&batch.inputs, &spec);
            unmerge_all(merged, adapters, alpha)?;
            counters.unmerges += 1;
            pass?
        }
        Variant::Unmerged => route_forward(model, adapters, batch, alpha, AdapterPath::Through)?,
        Variant::Detached => route_forward(model, adapters, batch, alpha, AdapterPath::Detached)?,
        other => {
            return Err(Error::InvalidSpec(format!(
                "variant {} does not produce adaptation records",
                other.name()
            )))
        }
    };
    counters.forward += 1;
    let correct = count_correct(pass.tape.value(pass.logits)?, &batch.labels);
    let loss = pass.tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
    let value = pass.tape.value(loss)?.item();
    let grads = pass.tape.backward(loss)?;
    counters.backward += 1;
    let scale = alpha * T::of(batch.len() as f64);
    let records = split_records(grads.taps(), &batch.owners, scale, iteration)?;
    Ok(BasePass {
        loss: value,
        correct,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: f64,
    pub correct: usize,
    pub rows: usize,
    pub records: usize,
    pub flushed: bool,
}

/// Drives the base device through the iterations of one run.
pub struct Trainer<T> {
    config: TrainingConfig,
    model: BaseModel<T>,
    adapters: AdapterSet<T>,
    offload: Option<OffloadHandle<T>>,
    classical: BTreeMap<AdapterKey, OptimizerState<T>>,
    base_state: Option<OptimizerState<T>>,
    counters: Counters,
    iteration: usize,
    total: usize,
    partial_flush: bool,
    shutdown: Option<ShutdownReport>,
    log: Vec<MessageLog>,
}

impl<T: Scalar> Trainer<T> {
    /// `total` is the planned iteration count (drives the schedule).
    pub fn new(mut model: BaseModel<T>, adapters: AdapterSet<T>, config: TrainingConfig, total: usize) -> Result<Self> {
        config.validate()?;
        model.check_adapters(&adapters)?;
        let mut offload = None;
        let mut classical = BTreeMap::new();
        let mut base_state = None;
        match config.variant {
            Variant::FullFineTune => {
                model.set_frozen(false);
                base_state = Some(OptimizerState::new(config.optimizer));
            }
            Variant::Classical => {
                if !model.is_frozen() {
                    return Err(Error::ModelNotFrozen);
                }
                classical = adapters
                    .keys()
                    .map(|k| (k, OptimizerState::new(config.optimizer)))
                    .collect();
            }
            _ => {
                if !model.is_frozen() {
                    return Err(Error::ModelNotFrozen);
                }
                if config.variant == Variant::Merged && !adapters.all_mergeable() {
                    return Err(Error::NotMergeable { kind: "mlp" });
                }
                offload = Some(spawn_offload(&adapters, config.optimizer, config.offload)?);
            }
        }
        Ok(Trainer {
            config,
            model,
            adapters,
            offload,
            classical,
            base_state,
            counters: Counters::default(),
            iteration: 0,
            total: total.max(1),
            partial_flush: false,
            shutdown: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn model(&self) -> &BaseModel<T> {
        &self.model
    }

    pub fn adapters(&self) -> &AdapterSet<T> {
        &self.adapters
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn offload(&self) -> Option<&OffloadHandle<T>> {
        self.offload.as_ref()
    }

    pub fn partial_flush(&self) -> bool {
        self.partial_flush
    }

    fn alpha(&self) -> T {
        T::of(self.config.alpha)
    }

    /// Learning rate of the adapter update that closes cycle `cycle`.
    fn cycle_rate(&self, cycle: usize) -> f64 {
        let cycles = self.total.div_ceil(self.config.interval);
        self.config.schedule.rate(self.config.lr, cycle, cycles)
    }

    pub fn train_step(&mut self, batch: &RoutedBatch<T>) -> Result<StepReport> {
        let t = self.iteration;
        let alpha = self.alpha();
        let mut report = StepReport {
            iteration: t,
            loss: 0.0,
            correct: 0,
            rows: batch.len(),
            records: 0,
            flushed: false,
        };
        match self.config.variant {
            Variant::Classical => {
                let lr = T::of(self.config.schedule.rate(self.config.lr, t, self.total));
                let out = self.model.classical_step(
                    &mut self.adapters,
                    &batch.inputs,
                    &batch.labels,
                    Some(&batch.owners),
                    alpha,
                    &mut self.classical,
                    lr,
                )?;
                self.counters.forward += 1;
                self.counters.backward += 1;
                report.loss = out.loss.as_f64();
                report.correct = out.correct;
            }
            Variant::FullFineTune => {
                let (loss, correct) = self.full_step(batch)?;
                report.loss = loss;
                report.correct = correct;
            }
            variant => {
                let pass = base_pass(&self.model, &mut self.adapters, batch, variant, alpha, t, &mut self.counters)?;
                report.loss = pass.loss.as_f64();
                report.correct = pass.correct;
                report.records = pass.records.len();
                self.counters.records += pass.records.len();
                self.offload
                    .as_mut()
                    .expect("offloading variant")
                    .dispatch(pass.records)?;
                if (t + 1) % self.config.interval == 0 {
                    self.flush(t / self.config.interval)?;
                    report.flushed = true;
                }
            }
        }
        if !report.loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        self.iteration += 1;
        Ok(report)
    }

    fn full_step(&mut self, batch: &RoutedBatch<T>) -> Result<(f64, usize)> {
        let spec = ForwardSpec {
            base_trainable: true,
            ..ForwardSpec::plain()
        };
        let mut pass = self.model.forward_on_tape(&batch.inputs, &spec)?;
        self.counters.forward += 1;
        let correct = count_correct(pass.tape.value(pass.logits)?, &batch.labels);
        let loss = pass.tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
        let value = pass.tape.value(loss)?.item();
        let grads = pass.tape.backward(loss)?;
        self.counters.backward += 1;
        let current = self.model.tunable_weights();
        let mut params = Vec::with_capacity(current.len() * 2);
        let mut g = Vec::with_capacity(current.len() * 2);
        for (p, &(wi, bi)) in current.iter().zip(&pass.base_params) {
            params.push(p.weight.clone());
            params.push(p.bias.clone());
            g.push(grads.get_or_zeros(wi, &p.weight));
            g.push(grads.get_or_zeros(bi, &p.bias));
        }
        let lr = T::of(self.config.schedule.rate(self.config.lr, self.iteration, self.total));
        self.base_state.as_mut().expect("full fine-tuning state").step(&mut params, &g, lr)?;
        for (m, pair) in params.chunks_exact(2).enumerate() {
            self.model.set_tunable_params(
                m,
                AffineParams {
                    weight: pair[0].clone(),
                    bias: pair[1].clone(),
                },
            )?;
        }
        Ok((value.as_f64(), correct))
    }

    fn flush(&mut self, cycle: usize) -> Result<()> {
        let lr = self.cycle_rate(cycle);
        let t = self.iteration;
        let steps = self.config.inner_steps;
        let outcome = self.offload.as_mut().expect("offloading variant").flush(t, lr, steps)?;
        for (key, a) in outcome.adapters.iter() {
            let mine = self
                .adapters
                .get_mut(key)
                .ok_or_else(|| Error::Offload(format!("upload for unknown adapter {key}")))?;
            mine.set_params(a.params().to_vec())?;
        }
        self.counters.flushes += 1;
        Ok(())
    }

    /// Flush any partial buffer and stop the offload devices.
    pub fn finish(&mut self) -> Result<Option<ShutdownReport>> {
        if let Some(h) = self.offload.as_ref() {
            if h.buffered_records() > 0 {
                let cycle = self.iteration.saturating_sub(1) / self.config.interval;
                self.flush(cycle)?;
                self.partial_flush = true;
            }
        }
        if let Some(h) = self.offload.take() {
            self.log = h.log().to_vec();
            self.shutdown = Some(h.shutdown());
        }
        Ok(self.shutdown)
    }

    /// Messages exchanged with the offload devices (complete after `finish`).
    pub fn message_log(&self) -> &[MessageLog] {
        match &self.offload {
            Some(h) => h.log(),
            None => &self.log,
        }
    }

    pub fn into_parts(self) -> (BaseModel<T>, AdapterSet<T>) {
        (self.model, self.adapters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 2000;

/// Accuracy and mean cross-entropy over `data`, with every row owned by
/// `owner` (user 0 by default). `merged` folds the adapters into the base
/// weights first.
pub fn evaluate<T: Scalar>(
    model: &BaseModel<T>,
    adapters: Option<&AdapterSet<T>>,
    data: &Dataset<T>,
    merged: bool,
    alpha: T,
    owner: Option<usize>,
) -> Result<Evaluation> {
    let weights = match (merged, adapters) {
        (true, Some(a)) => {
            let mut scratch = a.clone();
            Some(merge_all(model, &mut scratch, alpha)?)
        }
        _ => None,
    };
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let n = data.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (x, y) = data.batch(&idx)?;
        let owners = vec![owner.unwrap_or(0); idx.len()];
        let spec = ForwardSpec {
            adapters: if weights.is_some() { None } else { adapters },
            alpha,
            owners: Some(&owners),
            weights: weights.as_deref(),
            ..ForwardSpec::plain()
        };
        let mut pass = model.forward_on_tape(&x, &spec)?;
        correct += count_correct(pass.tape.value(pass.logits)?, &y);
        let l = pass.tape.softmax_cross_entropy(pass.logits, &y)?;
        loss_sum += pass.tape.value(l)?.item().as_f64() * idx.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: loss_sum / n as f64,
    })
}

/// Per-user training data and evaluation sets for one run.
pub struct RunData<'a, T> {
    pub train: Vec<&'a Dataset<T>>,
    pub test: Vec<&'a Dataset<T>>,
    /// Route every row to user 0 (one shared adapter set).
    pub shared: bool,
}

impl<'a, T: Scalar> RunData<'a, T> {
    pub fn single(train: &'a Dataset<T>, test: Option<&'a Dataset<T>>) -> Self {
        RunData {
            train: vec![train],
            test: test.into_iter().collect(),
            shared: true,
        }
    }

    /// Row quota of each user in a batch of `batch`.
    pub fn quotas(&self, batch: usize) -> Vec<usize> {
        let k = self.train.len();
        (0..k).map(|i| batch / k + usize::from(i < batch % k)).collect()
    }

    pub fn iterations_per_epoch(&self, batch: usize) -> usize {
        self.train
            .iter()
            .zip(self.quotas(batch))
            .map(|(d, q)| d.len().div_ceil(q.max(1)))
            .min()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<T> {
    pub history: Vec<MetricRecord>,
    pub model: BaseModel<T>,
    pub adapters: AdapterSet<T>,
    pub counters: Counters,
    pub iterations: usize,
    pub shutdown: Option<ShutdownReport>,
    pub partial_flush: bool,
    pub message_log: Vec<MessageLog>,
    /// Final test evaluation per user (one entry for single-user runs).
    pub final_eval: Vec<Evaluation>,
}

/// Train for the configured epochs (or iterations), evaluating on each
/// test set at epoch boundaries.
pub fn run_training<T: Scalar>(
    config: &TrainingConfig,
    model: BaseModel<T>,
    adapters: AdapterSet<T>,
    data: &RunData<'_, T>,
) -> Result<TrainingOutcome<T>> {
    config.validate()?;
    if data.train.is_empty() || data.train.iter().any(|d| d.is_empty()) {
        return Err(Error::Config("training data is empty".into()));
    }
    let users = data.train.len();
    let quotas = data.quotas(config.batch_size);
    if quotas.iter().any(|&q| q == 0) {
        return Err(Error::Config(format!("batch size {} is smaller than {users} users", config.batch_size)));
    }
    let per_epoch = data.iterations_per_epoch(config.batch_size);
    let total = config.iterations.unwrap_or(per_epoch * config.epochs);
    let epochs = total.div_ceil(per_epoch);
    let clock = Instant::now();
    let wall = |on: bool| on.then(|| clock.elapsed().as_secs_f64());

    let mut trainer = Trainer::new(model, adapters, config.clone(), total)?;
    let mut history = Vec::new();
    let mut done = 0;
    let mut final_eval = Vec::new();
    for epoch in 0..epochs {
        let orders: Vec<Vec<Vec<usize>>> = data
            .train
            .iter()
            .enumerate()
            .map(|(k, d)| batches(&epoch_order(d.len(), config.seed.wrapping_add(k as u64), epoch), quotas[k]))
            .collect();
        let (mut loss_sum, mut correct, mut rows) = (0.0, 0usize, 0usize);
        let steps = per_epoch.min(total - done);
        for b in 0..steps {
            let parts: Vec<(Tensor<T>, Vec<usize>)> = data
                .train
                .iter()
                .zip(&orders)
                .map(|(d, o)| d.batch(&o[b]))
                .collect::<Result<_>>()?;
            let mut batch = RoutedBatch::concat(&parts)?;
            if data.shared {
                batch.owners.iter_mut().for_each(|o| *o = 0);
            }
            let report = trainer.train_step(&batch)?;
            loss_sum += report.loss * report.rows as f64;
            correct += report.correct;
            rows += report.rows;
            done += 1;
        }
        let last = epoch + 1 == epochs;
        if last {
            trainer.finish()?;
        }
        history.push(MetricRecord {
            iter: done,
            epoch: epoch + 1,
            split: "train".into(),
            loss: loss_sum / rows.max(1) as f64,
            accuracy: correct as f64 / rows.max(1) as f64,
            wall_s: wall(config.wall_clock),
            user: None,
        });
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        if due || last {
            let evals = evaluate_all(&trainer, data)?;
            for (k, e) in evals.iter().enumerate() {
                history.push(MetricRecord {
                    iter: done,
                    epoch: epoch + 1,
                    split: "test".into(),
                    loss: e.loss,
                    accuracy: e.accuracy,
                    wall_s: wall(config.wall_clock),
                    user: (data.test.len() > 1).then_some(k),
                });
            }
            if last {
                final_eval = evals;
            }
        }
    }
    let counters = trainer.counters();
    let partial_flush = trainer.partial_flush();
    let shutdown = trainer.finish()?;
    let message_log = trainer.message_log().to_vec();
    let (model, adapters) = trainer.into_parts();
    Ok(TrainingOutcome {
        history,
        model,
        adapters,
        counters,
        iterations: done,
        shutdown,
        partial_flush,
        message_log,
        final_eval,
    })
}

fn evaluate_all<T: Scalar>(trainer: &Trainer<T>, data: &RunData<'_, T>) -> Result<Vec<Evaluation>> {
    let alpha = T::of(trainer.config().alpha);
    let adapters = trainer.adapters();
    let with = if adapters.is_empty() { None } else { Some(adapters) };
    // Merged training evaluates the model it trains: every user's delta folded in.
    let merged = trainer.config().variant == Variant::Merged;
    data.test
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let owner = if data.shared { 0 } else { k };
            evaluate(trainer.model(), with, d, merged, alpha, Some(owner))
        })
        .collect()
}
