//! Serving many users' adapters from one base model.
//!
//! A batch concatenates rows from several users. Every fine-tunable layer
//! applies user `k`'s adapter only to the rows `k` owns, so a single forward
//! and backward over the shared base yields each user's hidden gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKey, AdapterSet};
use crate::autodiff::TapPoint;
use crate::engine::AdaptationRecord;
use crate::error::{Error, Result};
use crate::model::{AdapterPath, AffineParams, BaseModel, ForwardPass, ForwardSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedBatch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub owners: Vec<usize>,
}

impl<T: Scalar> RoutedBatch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, owners: Vec<usize>) -> Result<Self> {
        let (n, _) = inputs.dims2("routed batch")?;
        if labels.len() != n || owners.len() != n {
            return Err(Error::shape(
                "routed batch",
                format!("{n} rows, {} labels, {} owners", labels.len(), owners.len()),
            ));
        }
        Ok(RoutedBatch {
            inputs,
            labels,
            owners,
        })
    }

    /// Every row owned by user 0.
    pub fn single(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(inputs, labels, vec![0; n])
    }

    /// Concatenate per-user batches in user order.
    pub fn concat(parts: &[(Tensor<T>, Vec<usize>)]) -> Result<Self> {
        let inputs: Vec<Tensor<T>> = parts.iter().map(|p| p.0.clone()).collect();
        let mut labels = Vec::new();
        let mut owners = Vec::new();
        for (k, (_, l)) in parts.iter().enumerate() {
            labels.extend_from_slice(l);
            owners.extend(std::iter::repeat(k).take(l.len()));
        }
        Self::new(Tensor::concat_rows(&inputs)?, labels, owners)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows owned by `user`, in batch order.
    pub fn rows_of(&self, user: usize) -> Vec<usize> {
        rows_of(&self.owners, user)
    }
}

fn rows_of(owners: &[usize], user: usize) -> Vec<usize> {
    owners
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == user)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CollaborationMode {
    /// One shared adapter set trained on everyone's data.
    #[default]
    Joint,
    /// One adapter set per user, kept unmerged during training.
    Alone,
    /// One adapter set per user, all merged into the base for each step.
    #[serde(rename = "collab", alias = "collaboration")]
    Collaboration,
}

impl CollaborationMode {
    pub fn name(&self) -> &'static str {
        match self {
            CollaborationMode::Joint => "joint",
            CollaborationMode::Alone => "alone",
            CollaborationMode::Collaboration => "collab",
        }
    }

    /// Adapter sets trained for `users` users.
    pub fn adapter_sets(&self, users: usize) -> usize {
        match self {
            CollaborationMode::Joint => 1,
            _ => users,
        }
    }
}

/// Record a routed forward pass with taps at every fine-tunable layer.
pub fn route_forward<T: Scalar>(
    model: &BaseModel<T>,
    adapters: &AdapterSet<T>,
    batch: &RoutedBatch<T>,
    alpha: T,
    path: AdapterPath,
) -> Result<ForwardPass<T>> {
    let spec = ForwardSpec {
        owners: Some(&batch.owners),
        taps: true,
        ..ForwardSpec::with_adapters(adapters, alpha, path)
    };
    model.forward_on_tape(&batch.inputs, &spec)
}

/// Partition tapped layers by owner into per-`(m, k)` records.
///
/// `scale` converts the batch-mean gradient `∇ĥ` into per-sample gradients of
/// the adapter output: `α·n` for a mean loss over `n` rows.
pub fn split_records<T: Scalar>(
    taps: &[TapPoint<T>],
    owners: &[usize],
    scale: T,
    iteration: usize,
) -> Result<Vec<AdaptationRecord<T>>> {
    let users = owners.iter().max().map_or(0, |&k| k + 1);
    let by_user: Vec<Vec<usize>> = (0..users).map(|k| rows_of(owners, k)).collect();
    let mut out = Vec::new();
    for tap in taps {
        let input = tap
            .input
            .as_ref()
            .ok_or_else(|| Error::shape("split_records", "tap has no hidden input"))?;
        let (n, _) = tap.grad.dims2("split_records")?;
        if n != owners.len() || input.shape()[0] != n {
            return Err(Error::shape(
                "split_records",
                format!("tap covers {n} rows, {} owners", owners.len()),
            ));
        }
        let grad = tap.grad.scale(scale);
        for (k, rows) in by_user.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let (input, grad) = if rows.len() == n {
                (input.clone(), grad.clone())
            } else {
                (input.select_rows(rows)?, grad.select_rows(rows)?)
            };
            out.push(AdaptationRecord {
                layer: tap.layer,
                user: k,
                input,
                grad,
                iteration,
            });
        }
    }
    Ok(out)
}

/// `θ̂_m = θ_m + Σ_k α·dense(g_{m,k})` for every fine-tunable layer. Marks
/// every adapter merged; the model itself is not modified.
pub fn merge_all<T: Scalar>(
    model: &BaseModel<T>,
    adapters: &mut AdapterSet<T>,
    alpha: T,
) -> Result<Vec<AffineParams<T>>> {
    if let Some((_, a)) = adapters.iter().find(|(_, a)| !a.mergeable()) {
        return Err(Error::NotMergeable {
            kind: a.spec().kind.name(),
        });
    }
    model.check_adapters(adapters)?;
    let mut weights = model.tunable_weights();
    for (key, a) in adapters.iter_mut() {
        let w = &mut weights[key.layer];
        w.weight = a.merge(&w.weight, alpha)?;
    }
    Ok(weights)
}

/// Remove every adapter from `merged`, returning the restored weights.
pub fn unmerge_all<T: Scalar>(
    merged: Vec<AffineParams<T>>,
    adapters: &mut AdapterSet<T>,
    alpha: T,
) -> Result<Vec<AffineParams<T>>> {
    let mut weights = merged;
    let keys: Vec<AdapterKey> = adapters.keys().collect();
    for key in keys.into_iter().rev() {
        let a = adapters.get_mut(&key).expect("key from this set");
        let w = &mut weights[key.layer];
        w.weight = a.unmerge(&w.weight, alpha)?;
    }
    Ok(weights)
}

/// Per-user row counts of every tapped layer.
pub fn row_counts<T: Scalar>(records: &[AdaptationRecord<T>]) -> BTreeMap<AdapterKey, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.key()).or_insert(0) += r.rows();
    }
    out
}
