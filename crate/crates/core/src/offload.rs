//! Simulated low-cost devices that own adapters and fit them on shipped data.
//!
//! Workers hold the authoritative adapter parameters, their optimizer state and
//! the adaptation buffers. The trainer talks to them only through messages:
//! adapter uploads, adaptation data, flush requests and acknowledgments. In
//! synchronous mode every message is handled in-process, in order; in
//! concurrent mode each worker is a thread fed by a FIFO channel.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterKey, AdapterSet, AdapterSpec};
use crate::checkpoint::{decode_adapters, encode_adapter};
use crate::engine::{AdaptationRecord, Buffer};
use crate::error::{Error, Result};
use crate::optim::{OptimizerSpec, OptimizerState};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OffloadMode {
    #[default]
    Sync,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OffloadConfig {
    pub workers: usize,
    pub mode: OffloadMode,
    /// Per-acknowledgment wait in concurrent mode.
    pub timeout_ms: u64,
}

impl Default for OffloadConfig {
    fn default() -> Self {
        OffloadConfig {
            workers: 1,
            mode: OffloadMode::Sync,
            timeout_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    AdaptationData,
    AdapterUpload,
    FlushRequest,
    Ack,
}

/// One line of the message log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageLog {
    pub seq: u64,
    pub kind: MessageKind,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub t: Option<usize>,
    pub bytes: usize,
}

/// Adapter parameter update sent back to the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub key: AdapterKey,
    pub bytes: Vec<u8>,
}

/// Result of one adaptation cycle across all workers.
#[derive(Debug, Clone, PartialEq)]
pub struct FlushOutcome<T> {
    pub adapters: AdapterSet<T>,
    /// Auxiliary loss before the first inner step, per adapter.
    pub aux_loss: BTreeMap<AdapterKey, f64>,
    pub records: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutdownReport {
    pub dispatched: usize,
    pub consumed: usize,
    pub buffered: usize,
    pub messages: u64,
}

enum Command<T> {
    Upload { key: AdapterKey, spec: AdapterSpec, bytes: Vec<u8> },
    Data(Vec<AdaptationRecord<T>>),
    Flush { lr: f64, steps: usize },
    Stall(Duration),
    Shutdown,
}

struct Ack {
    uploads: Vec<Upload>,
    aux_loss: Vec<(AdapterKey, f64)>,
    records: usize,
    samples: usize,
}

/// State of one offload device.
struct Worker<T> {
    optimizer: OptimizerSpec,
    adapters: BTreeMap<AdapterKey, Adapter<T>>,
    states: BTreeMap<AdapterKey, OptimizerState<T>>,
    buffers: BTreeMap<AdapterKey, Buffer<T>>,
}

impl<T: Scalar> Worker<T> {
    fn new(optimizer: OptimizerSpec) -> Self {
        Worker {
            optimizer,
            adapters: BTreeMap::new(),
            states: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    fn handle(&mut self, cmd: Command<T>) -> Result<Option<Ack>> {
        match cmd {
            Command::Upload { key, spec, bytes } => {
                let decoded = decode_adapters::<T>(&bytes)?;
                let (_, a) = decoded
                    .iter()
                    .next()
                    .ok_or_else(|| Error::Offload(format!("empty upload for {key}")))?;
                let adapter = Adapter::from_params(spec, a.params().to_vec())?;
                self.adapters.insert(key, adapter);
                self.states.insert(key, OptimizerState::new(self.optimizer));
                self.buffers.entry(key).or_default();
                Ok(None)
            }
            Command::Data(records) => {
                for r in records {
                    let key = r.key();
                    let buffer = self
                        .buffers
                        .get_mut(&key)
                        .ok_or_else(|| Error::Offload(format!("worker does not own {key}")))?;
                    buffer.push(r)?;
                }
                Ok(None)
            }
            Command::Flush { lr, steps, .. } => {
                let mut ack = Ack {
                    uploads: Vec::new(),
                    aux_loss: Vec::new(),
                    records: 0,
                    samples: 0,
                };
                for (key, buffer) in self.buffers.iter_mut() {
                    if buffer.is_empty() {
                        continue;
                    }
                    ack.samples += buffer.samples();
                    let records = buffer.drain();
                    ack.records += records.len();
                    let adapter = self.adapters.get_mut(key).expect("buffer implies adapter");
                    let state = self.states.get_mut(key).expect("buffer implies state");
                    let loss = adapter.fit_step(&records, T::of(lr), steps, state)?;
                    ack.aux_loss.push((*key, loss.as_f64()));
                    ack.uploads.push(Upload {
                        key: *key,
                        bytes: encode_adapter(*key, adapter),
                    });
                }
                Ok(Some(ack))
            }
            Command::Stall(d) => {
                thread::sleep(d);
                Ok(None)
            }
            Command::Shutdown => Ok(None),
        }
    }
}

struct Remote<T> {
    tx: Sender<Command<T>>,
    rx: Receiver<std::result::Result<Ack, String>>,
    join: Option<JoinHandle<()>>,
}

impl<T> Drop for Remote<T> {
    fn drop(&mut self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

enum Backend<T> {
    Sync(Vec<Worker<T>>),
    Threads(Vec<Remote<T>>),
}

/// Trainer-side handle to the offload devices.
pub struct OffloadHandle<T> {
    config: OffloadConfig,
    specs: BTreeMap<AdapterKey, AdapterSpec>,
    assignment: BTreeMap<AdapterKey, usize>,
    backend: Backend<T>,
    log: Vec<MessageLog>,
    seq: u64,
    pending_records: BTreeMap<AdapterKey, usize>,
    pending_samples: BTreeMap<AdapterKey, usize>,
    dispatched: usize,
    consumed: usize,
}

/// Start `config.workers` devices and hand each its round-robin share of the
/// adapters, ordered by `(layer, user)`.
pub fn spawn_offload<T: Scalar>(
    adapters: &AdapterSet<T>,
    optimizer: OptimizerSpec,
    config: OffloadConfig,
) -> Result<OffloadHandle<T>> {
    if config.workers == 0 {
        return Err(Error::Offload("at least one worker is required".into()));
    }
    let assignment: BTreeMap<AdapterKey, usize> = adapters
        .keys()
        .enumerate()
        .map(|(i, k)| (k, i % config.workers))
        .collect();
    let backend = match config.mode {
        OffloadMode::Sync => Backend::Sync((0..config.workers).map(|_| Worker::new(optimizer)).collect()),
        OffloadMode::Concurrent => Backend::Threads(
            (0..config.workers)
                .map(|id| spawn_thread::<T>(id, optimizer))
                .collect::<Result<_>>()?,
        ),
    };
    let mut handle = OffloadHandle {
        config,
        specs: adapters.iter().map(|(k, a)| (*k, *a.spec())).collect(),
        assignment,
        backend,
        log: Vec::new(),
        seq: 0,
        pending_records: adapters.keys().map(|k| (k, 0)).collect(),
        pending_samples: adapters.keys().map(|k| (k, 0)).collect(),
        dispatched: 0,
        consumed: 0,
    };
    for (key, a) in adapters.iter() {
        let bytes = encode_adapter(*key, a);
        handle.record(MessageKind::AdapterUpload, Some(*key), None, bytes.len());
        let worker = handle.assignment[key];
        handle.send(
            worker,
            Command::Upload {
                key: *key,
                spec: *a.spec(),
                bytes,
            },
        )?;
    }
    Ok(handle)
}

fn spawn_thread<T: Scalar>(id: usize, optimizer: OptimizerSpec) -> Result<Remote<T>> {
    let (tx, inbox) = mpsc::channel::<Command<T>>();
    let (outbox, rx) = mpsc::channel();
    let join = thread::Builder::new()
        .name(format!("offload-{id}"))
        .spawn(move || {
            let mut worker = Worker::<T>::new(optimizer);
            while let Ok(cmd) = inbox.recv() {
                let stop = matches!(cmd, Command::Shutdown);
                match worker.handle(cmd) {
                    Ok(Some(ack)) => {
                        if outbox.send(Ok(ack)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        let _ = outbox.send(Err(e.to_string()));
                    }
                }
                if stop {
                    break;
                }
            }
        })?;
    Ok(Remote {
        tx,
        rx,
        join: Some(join),
    })
}

impl<T: Scalar> OffloadHandle<T> {
    pub fn config(&self) -> OffloadConfig {
        self.config
    }

    pub fn workers(&self) -> usize {
        self.config.workers
    }

    pub fn assignment(&self) -> &BTreeMap<AdapterKey, usize> {
        &self.assignment
    }

    /// Adapters owned by `worker`.
    pub fn owned(&self, worker: usize) -> Vec<AdapterKey> {
        self.assignment
            .iter()
            .filter(|(_, &w)| w == worker)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn log(&self) -> &[MessageLog] {
        &self.log
    }

    /// Write the message log as JSON lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for entry in &self.log {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows currently buffered for `key`.
    pub fn buffered_samples(&self, key: &AdapterKey) -> usize {
        self.pending_samples.get(key).copied().unwrap_or(0)
    }

    /// Records currently buffered across all adapters.
    pub fn buffered_records(&self) -> usize {
        self.pending_records.values().sum()
    }

    pub fn dispatched(&self) -> usize {
        self.dispatched
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    fn record(&mut self, kind: MessageKind, key: Option<AdapterKey>, t: Option<usize>, bytes: usize) {
        self.log.push(MessageLog {
            seq: self.seq,
            kind,
            m: key.map(|k| k.layer),
            k: key.map(|k| k.user),
            t,
            bytes,
        });
        self.seq += 1;
    }

    fn send(&mut self, worker: usize, cmd: Command<T>) -> Result<Option<Ack>> {
        match &mut self.backend {
            Backend::Sync(workers) => workers[worker].handle(cmd),
            Backend::Threads(remotes) => {
                remotes[worker]
                    .tx
                    .send(cmd)
                    .map_err(|_| Error::Offload(format!("worker {worker} is gone")))?;
                Ok(None)
            }
        }
    }

    /// Ship adaptation records to the workers owning their adapters.
    pub fn dispatch(&mut self, records: Vec<AdaptationRecord<T>>) -> Result<()> {
        let mut per_worker: BTreeMap<usize, Vec<AdaptationRecord<T>>> = BTreeMap::new();
        for r in records {
            let key = r.key();
            let &worker = self
                .assignment
                .get(&key)
                .ok_or_else(|| Error::Offload(format!("no worker owns adapter {key}")))?;
            self.record(MessageKind::AdaptationData, Some(key), Some(r.iteration), r.bytes());
            *self.pending_records.get_mut(&key).expect("assigned key") += 1;
            *self.pending_samples.get_mut(&key).expect("assigned key") += r.rows();
            self.dispatched += 1;
            per_worker.entry(worker).or_default().push(r);
        }
        for (worker, batch) in per_worker {
            self.send(worker, Command::Data(batch))?;
        }
        Ok(())
    }

    /// Fit every buffered adapter (`steps` optimizer steps at rate `lr`) and
    /// collect the updated parameters. Errors with [`Error::EmptyBuffer`] when
    /// nothing was dispatched since the previous flush.
    pub fn flush(&mut self, t: usize, lr: f64, steps: usize) -> Result<FlushOutcome<T>> {
        if self.buffered_records() == 0 {
            return Err(Error::EmptyBuffer);
        }
        let mut targets: Vec<usize> = self
            .pending_records
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(k, _)| self.assignment[k])
            .collect();
        targets.sort_unstable();
        targets.dedup();

        let mut acks = Vec::with_capacity(targets.len());
        for &w in &targets {
            self.record(MessageKind::FlushRequest, None, Some(t), 0);
            if let Some(ack) = self.send(w, Command::Flush { lr, steps })? {
                acks.push(ack);
            }
        }
        if let Backend::Threads(remotes) = &self.backend {
            let timeout = Duration::from_millis(self.config.timeout_ms);
            for &w in &targets {
                match remotes[w].rx.recv_timeout(timeout) {
                    Ok(Ok(ack)) => acks.push(ack),
                    Ok(Err(msg)) => return Err(Error::Offload(format!("worker {w}: {msg}"))),
                    Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout { worker: w }),
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(Error::Offload(format!("worker {w} disconnected")))
                    }
                }
            }
        }

        let mut outcome = FlushOutcome {
            adapters: AdapterSet::new(),
            aux_loss: BTreeMap::new(),
            records: 0,
            samples: 0,
        };
        for ack in acks {
            self.record(MessageKind::Ack, None, Some(t), 0);
            outcome.records += ack.records;
            outcome.samples += ack.samples;
            outcome.aux_loss.extend(ack.aux_loss);
            for up in ack.uploads {
                self.record(MessageKind::AdapterUpload, Some(up.key), Some(t), up.bytes.len());
                let decoded = decode_adapters::<T>(&up.bytes)?;
                let (_, a) = decoded
                    .iter()
                    .next()
                    .ok_or_else(|| Error::Offload(format!("empty upload for {}", up.key)))?;
                let adapter = Adapter::from_params(self.specs[&up.key], a.params().to_vec())?;
                outcome.adapters.insert(up.key, adapter);
                self.pending_records.insert(up.key, 0);
                self.pending_samples.insert(up.key, 0);
            }
        }
        self.consumed += outcome.records;
        Ok(outcome)
    }

    /// Make a concurrent worker unresponsive for `d` (fault injection).
    pub fn stall_worker(&mut self, worker: usize, d: Duration) -> Result<()> {
        if worker >= self.config.workers {
            return Err(Error::Offload(format!("no worker {worker}")));
        }
        match self.backend {
            Backend::Sync(_) => Err(Error::Offload("stalls only apply in concurrent mode".into())),
            Backend::Threads(_) => self.send(worker, Command::Stall(d)).map(|_| ()),
        }
    }

    pub fn shutdown(self) -> ShutdownReport {
        ShutdownReport {
            dispatched: self.dispatched,
            consumed: self.consumed,
            buffered: self.buffered_records(),
            messages: self.seq,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterKind;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(layers: usize, users: usize) -> AdapterSet<f64> {
        let mut s = AdapterSet::new();
        for m in 0..layers {
            for k in 0..users {
                let spec = AdapterSpec::new(AdapterKind::Linear, 3, 2).unwrap();
                s.insert(AdapterKey::new(m, k), Adapter::init(spec, 0).unwrap());
            }
        }
        s
    }

    fn rec(key: AdapterKey, t: usize, zero: bool, seed: u64) -> AdaptationRecord<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grad = if zero {
            Tensor::zeros(&[4, 2]).unwrap()
        } else {
            Tensor::uniform(&[4, 2], 1.0, &mut rng).unwrap()
        };
        AdaptationRecord {
            layer: key.layer,
            user: key.user,
            input: Tensor::uniform(&[4, 3], 1.0, &mut rng).unwrap(),
            grad,
            iteration: t,
        }
    }

    #[test]
    fn needs_a_worker() {
        let cfg = OffloadConfig {
            workers: 0,
            ..OffloadConfig::default()
        };
        assert!(spawn_offload(&set(1, 1), OptimizerSpec::Sgd, cfg).is_err());
    }

    #[test]
    fn round_robin_ownership() {
        let one = spawn_offload(&set(3, 2), OptimizerSpec::Sgd, OffloadConfig::default()).unwrap();
        assert_eq!(one.owned(0).len(), 6);
        let cfg = OffloadConfig {
            workers: 3,
            ..OffloadConfig::default()
        };
        let three = spawn_offload(&set(3, 2), OptimizerSpec::Sgd, cfg).unwrap();
        for w in 0..3 {
            assert_eq!(three.owned(w).len(), 2);
        }
    }

    #[test]
    fn zero_gradient_flush_returns_same_adapter_then_empty() {
        let s = set(1, 1);
        let key = AdapterKey::new(0, 0);
        let mut h = spawn_offload(&s, OptimizerSpec::Sgd, OffloadConfig::default()).unwrap();
        h.dispatch(vec![rec(key, 0, true, 1)]).unwrap();
        assert_eq!(h.buffered_samples(&key), 4);
        let out = h.flush(0, 0.5, 1).unwrap();
        assert_eq!(out.adapters.get(&key), s.get(&key));
        assert_eq!(h.buffered_samples(&key), 0);
        assert!(matches!(h.flush(1, 0.5, 1), Err(Error::EmptyBuffer)));
        let kinds: Vec<MessageKind> = h.log().iter().map(|l| l.kind).collect();
        assert_eq!(
            kinds,
            [
                MessageKind::AdapterUpload,
                MessageKind::AdaptationData,
                MessageKind::FlushRequest,
                MessageKind::Ack,
                MessageKind::AdapterUpload
            ]
        );
        assert!(h.log().windows(2).all(|w| w[1].seq == w[0].seq + 1));
    }

    #[test]
    fn conservation_and_unknown_keys() {
        let s = set(2, 1);
        let mut h = spawn_offload(&s, OptimizerSpec::Sgd, OffloadConfig::default()).unwrap();
        let a = AdapterKey::new(0, 0);
        let b = AdapterKey::new(1, 0);
        h.dispatch(vec![rec(a, 0, false, 1), rec(b, 0, false, 2)]).unwrap();
        h.flush(0, 0.1, 1).unwrap();
        h.dispatch(vec![rec(a, 1, false, 3)]).unwrap();
        assert!(h.dispatch(vec![rec(AdapterKey::new(5, 0), 1, false, 4)]).is_err());
        let report = h.shutdown();
        assert_eq!(report.dispatched, 3);
        assert_eq!(report.consumed, 2);
        assert_eq!(report.buffered, 1);
        assert_eq!(report.dispatched, report.consumed + report.buffered);
    }

    fn run(mode: OffloadMode) -> Vec<AdapterSet<f64>> {
        let s = set(3, 2);
        let cfg = OffloadConfig {
            workers: 3,
            mode,
            timeout_ms: 10_000,
        };
        let mut h = spawn_offload(&s, OptimizerSpec::adamw(5e-4), cfg).unwrap();
        let mut out = Vec::new();
        for t in 0..4 {
            let recs = s.keys().enumerate().map(|(i, k)| rec(k, t, false, (t * 10 + i) as u64)).collect();
            h.dispatch(recs).unwrap();
            out.push(h.flush(t, 0.01, 2).unwrap().adapters);
        }
        out
    }

    #[test]
    fn concurrent_matches_sync_bit_exactly() {
        assert_eq!(run(OffloadMode::Sync), run(OffloadMode::Concurrent));
    }

    #[test]
    fn stalled_worker_times_out() {
        let s = set(1, 2);
        let cfg = OffloadConfig {
            workers: 2,
            mode: OffloadMode::Concurrent,
            timeout_ms: 50,
        };
        let mut h = spawn_offload(&s, OptimizerSpec::Sgd, cfg).unwrap();
        h.stall_worker(1, Duration::from_millis(400)).unwrap();
        h.dispatch(s.keys().map(|k| rec(k, 0, false, 1)).collect()).unwrap();
        assert!(matches!(h.flush(0, 0.1, 1), Err(Error::Timeout { worker: 1 })));
    }
}
