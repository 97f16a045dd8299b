//! Auxiliary models attached to fine-tunable layers.
//!
//! An adapter maps a layer's hidden input `x` to a change `Δh` of its output.
//! Freshly initialized adapters output exactly zero. Adapters that are linear
//! in `x` (low-rank and dense linear) can be folded into the layer weight;
//! the MLP adapter cannot.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::engine::AdaptationRecord;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_MLP_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterKind {
    /// `Δh = scale · B A x` with `A: r×in`, `B: out×r`.
    #[serde(rename = "lowrank")]
    LowRank { rank: usize, scale: f64 },
    /// `Δh = W x` with `W: out×in`.
    Linear,
    /// `Δh = W2 relu(W1 x + b1) + b2`.
    Mlp { hidden: usize },
}

impl AdapterKind {
    pub fn low_rank() -> Self {
        AdapterKind::LowRank {
            rank: DEFAULT_RANK,
            scale: 1.0,
        }
    }

    pub fn mlp() -> Self {
        AdapterKind::Mlp {
            hidden: DEFAULT_MLP_HIDDEN,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::LowRank { .. } => "lowrank",
            AdapterKind::Linear => "linear",
            AdapterKind::Mlp { .. } => "mlp",
        }
    }

    pub fn mergeable(&self) -> bool {
        !matches!(self, AdapterKind::Mlp { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, in_dim: usize, out_dim: usize) -> Result<Self> {
        let spec = AdapterSpec {
            kind,
            in_dim,
            out_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidSpec("adapter dims must be positive".into()));
        }
        match self.kind {
            AdapterKind::LowRank { rank, scale } => {
                if rank == 0 || rank > self.in_dim.min(self.out_dim) {
                    return Err(Error::InvalidSpec(format!(
                        "rank {rank} must be in 1..={}",
                        self.in_dim.min(self.out_dim)
                    )));
                }
                if !scale.is_finite() {
                    return Err(Error::InvalidSpec("non-finite low-rank scale".into()));
                }
            }
            AdapterKind::Linear => {}
            AdapterKind::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidSpec("mlp hidden size must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (i, o) = (self.in_dim, self.out_dim);
        match self.kind {
            AdapterKind::LowRank { rank, .. } => vec![vec![rank, i], vec![o, rank]],
            AdapterKind::Linear => vec![vec![o, i]],
            AdapterKind::Mlp { hidden } => vec![vec![hidden, i], vec![hidden], vec![o, hidden], vec![o]],
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.kind {
            AdapterKind::LowRank { .. } => &["A", "B"],
            AdapterKind::Linear => &["W"],
            AdapterKind::Mlp { .. } => &["W1", "b1", "W2", "b2"],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Width of the representations the adapter materializes per sample
    /// (internal hidden units plus its output).
    pub fn representation_width(&self) -> usize {
        match self.kind {
            AdapterKind::LowRank { rank, .. } => rank + self.out_dim,
            AdapterKind::Linear => self.out_dim,
            AdapterKind::Mlp { hidden } => hidden + self.out_dim,
        }
    }
}

/// Index of an adapter: fine-tunable layer `layer` (0-based) of user `user`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterKey {
    pub layer: usize,
    pub user: usize,
}

impl AdapterKey {
    pub fn new(layer: usize, user: usize) -> Self {
        AdapterKey { layer, user }
    }
}

impl fmt::Display for AdapterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(m={}, k={})", self.layer, self.user)
    }
}

/// How adapter parameters enter a forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Parameters are leaves with gradients (classical PEFT backprop).
    Trainable,
    /// Parameters are constants; gradients still flow through the adapter to its input.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    spec: AdapterSpec,
    params: Vec<Tensor<T>>,
    merged: bool,
}

impl<T: Scalar> Adapter<T> {
    /// Zero-output initialization.
    ///
    /// Low-rank: `A ~ N(0, 1/r)`, `B = 0`. Linear: `W = 0`. MLP: `W1 ~ N(0, 1/in)`,
    /// `b1 = 0`, output layer zero.
    pub fn init(spec: AdapterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.param_shapes();
        let params = match spec.kind {
            AdapterKind::LowRank { rank, .. } => vec![
                Tensor::gaussian(&shapes[0], (1.0 / rank as f64).sqrt(), &mut rng)?,
                Tensor::zeros(&shapes[1])?,
            ],
            AdapterKind::Linear => vec![Tensor::zeros(&shapes[0])?],
            AdapterKind::Mlp { .. } => vec![
                Tensor::gaussian(&shapes[0], (1.0 / spec.in_dim as f64).sqrt(), &mut rng)?,
                Tensor::zeros(&shapes[1])?,
                Tensor::zeros(&shapes[2])?,
                Tensor::zeros(&shapes[3])?,
            ],
        };
        Ok(Adapter {
            spec,
            params,
            merged: false,
        })
    }

    /// Build from explicit parameters (shapes must match the spec).
    pub fn from_params(spec: AdapterSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if params.len() != shapes.len()
            || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::shape(
                "adapter",
                format!(
                    "parameters {:?} do not fit {:?}",
                    params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                    shapes
                ),
            ));
        }
        Ok(Adapter {
            spec,
            params,
            merged: false,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        let fresh = Self::from_params(self.spec, params)?;
        self.params = fresh.params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn mergeable(&self) -> bool {
        self.spec.kind.mergeable()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, width) = x.dims2("adapter")?;
        if width != self.spec.in_dim {
            return Err(Error::shape(
                "adapter",
                format!("input width {width}, adapter expects {}", self.spec.in_dim),
            ));
        }
        Ok(())
    }

    /// Record `g(x)` on `tape`. Returns the output and the parameter ids.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: ValueId,
        mode: ParamMode,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        self.check_input(tape.value(x)?)?;
        let ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| match mode {
                ParamMode::Trainable => tape.param(p.clone()),
                ParamMode::Frozen => tape.constant(p.clone()),
            })
            .collect();
        let out = match self.spec.kind {
            AdapterKind::LowRank { scale, .. } => {
                let down = tape.matmul_t(x, ids[0])?;
                let up = tape.matmul_t(down, ids[1])?;
                tape.scale(up, T::of(scale))?
            }
            AdapterKind::Linear => tape.matmul_t(x, ids[0])?,
            AdapterKind::Mlp { .. } => {
                let pre = tape.matmul_t(x, ids[0])?;
                let pre = tape.add(pre, ids[1])?;
                let hidden = tape.relu(pre)?;
                let out = tape.matmul_t(hidden, ids[2])?;
                tape.add(out, ids[3])?
            }
        };
        Ok((out, ids))
    }

    /// `Δh = g(x)` for a batch `x: n×in`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let (out, _) = self.apply_on_tape(&mut tape, xi, ParamMode::Frozen)?;
        Ok(tape.value(out)?.clone())
    }

    /// Dense `out×in` matrix of a linear-in-input adapter.
    pub fn dense(&self) -> Result<Tensor<T>> {
        match self.spec.kind {
            AdapterKind::LowRank { scale, .. } => {
                Ok(self.params[1].matmul(&self.params[0])?.scale(T::of(scale)))
            }
            AdapterKind::Linear => Ok(self.params[0].clone()),
            AdapterKind::Mlp { .. } => Err(Error::NotMergeable { kind: "mlp" }),
        }
    }

    fn check_weight(&self, theta: &Tensor<T>) -> Result<()> {
        let expected = [self.spec.out_dim, self.spec.in_dim];
        if theta.shape() != expected {
            return Err(Error::shape(
                "merge",
                format!("layer weight {:?}, adapter needs {expected:?}", theta.shape()),
            ));
        }
        Ok(())
    }

    /// `θ̂ = θ + α·dense(g)`; marks the adapter merged.
    pub fn merge(&mut self, theta: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
        if !self.mergeable() {
            return Err(Error::NotMergeable {
                kind: self.spec.kind.name(),
            });
        }
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        self.check_weight(theta)?;
        let merged = theta.add(&self.dense()?.scale(alpha))?;
        self.merged = true;
        Ok(merged)
    }

    /// `θ = θ̂ − α·dense(g)`; clears the merged mark.
    pub fn unmerge(&mut self, merged: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
        if !self.merged {
            return Err(Error::NotMerged);
        }
        self.check_weight(merged)?;
        let theta = merged.sub(&self.dense()?.scale(alpha))?;
        self.merged = false;
        Ok(theta)
    }

    /// Gradient of `½·mean‖g_w(x) − target‖²` at the current parameters.
    fn aux_step_grads(&self, x: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let (out, ids) = self.apply_on_tape(&mut tape, xi, ParamMode::Trainable)?;
        let ti = tape.constant(target.clone());
        let loss = tape.mse(out, ti)?;
        let value = tape.value(loss)?.item();
        let grads = tape.backward(loss)?;
        let g = ids
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| grads.get_or_zeros(id, p))
            .collect();
        Ok((value, g))
    }

    /// Pseudo-residual target `g_w(x) − grad` at the current parameters.
    fn target(&self, inputs: &Tensor<T>, grads: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(inputs)?;
        let current = self.apply(inputs)?;
        if current.shape() != grads.shape() {
            return Err(Error::shape(
                "fit",
                format!("gradient {:?} vs output {:?}", grads.shape(), current.shape()),
            ));
        }
        current.sub(grads)
    }

    /// Gradient of the auxiliary quadratic loss at the current parameters for
    /// buffered `(inputs, grads)` without updating anything.
    pub fn aux_gradients(&self, inputs: &Tensor<T>, grads: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let target = self.target(inputs, grads)?;
        Ok(self.aux_step_grads(inputs, &target)?.1)
    }

    /// Fit toward the fixed target `g_{w^t}(x) − grad`, one optimizer step per
    /// entry of `lrs`. Returns the auxiliary loss before each step.
    pub fn fit(
        &mut self,
        inputs: &Tensor<T>,
        grads: &Tensor<T>,
        lrs: &[T],
        state: &mut OptimizerState<T>,
    ) -> Result<Vec<T>> {
        if self.merged {
            return Err(Error::AlreadyMerged);
        }
        let target = self.target(inputs, grads)?;
        let mut losses = Vec::with_capacity(lrs.len());
        for &lr in lrs {
            let (loss, g) = self.aux_step_grads(inputs, &target)?;
            state.step(&mut self.params, &g, lr)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    /// One adaptation update from buffered records (`inner_steps` optimizer steps).
    pub fn fit_step(
        &mut self,
        records: &[AdaptationRecord<T>],
        lr: T,
        inner_steps: usize,
        state: &mut OptimizerState<T>,
    ) -> Result<T> {
        let (inputs, grads) = stack_records(records)?;
        let losses = self.fit(&inputs, &grads, &vec![lr; inner_steps.max(1)], state)?;
        Ok(losses[0])
    }
}

/// Concatenate record inputs and gradients row-wise.
pub fn stack_records<T: Scalar>(records: &[AdaptationRecord<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    if records.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let inputs: Vec<Tensor<T>> = records.iter().map(|r| r.input.clone()).collect();
    let grads: Vec<Tensor<T>> = records.iter().map(|r| r.grad.clone()).collect();
    Ok((Tensor::concat_rows(&inputs)?, Tensor::concat_rows(&grads)?))
}

/// All adapters of a run, keyed by `(layer, user)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet<T> {
    adapters: BTreeMap<AdapterKey, Adapter<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn new() -> Self {
        AdapterSet {
            adapters: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: AdapterKey, adapter: Adapter<T>) -> Option<Adapter<T>> {
        self.adapters.insert(key, adapter)
    }

    pub fn get(&self, key: &AdapterKey) -> Option<&Adapter<T>> {
        self.adapters.get(key)
    }

    pub fn get_mut(&mut self, key: &AdapterKey) -> Option<&mut Adapter<T>> {
        self.adapters.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AdapterKey, &Adapter<T>)> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&AdapterKey, &mut Adapter<T>)> {
        self.adapters.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = AdapterKey> + '_ {
        self.adapters.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// One past the largest user id present.
    pub fn users(&self) -> usize {
        self.adapters.keys().map(|k| k.user + 1).max().unwrap_or(0)
    }

    /// Adapters attached to fine-tunable layer `layer`, ordered by user.
    pub fn at_layer(&self, layer: usize) -> impl Iterator<Item = (&AdapterKey, &Adapter<T>)> {
        self.adapters.iter().filter(move |(k, _)| k.layer == layer)
    }

    pub fn param_count(&self) -> usize {
        self.adapters.values().map(Adapter::param_count).sum()
    }

    pub fn all_mergeable(&self) -> bool {
        self.adapters.values().all(Adapter::mergeable)
    }

    /// Restrict to one user, re-keyed as user 0.
    pub fn for_user(&self, user: usize) -> Self {
        AdapterSet {
            adapters: self
                .adapters
                .iter()
                .filter(|(k, _)| k.user == user)
                .map(|(k, a)| (AdapterKey::new(k.layer, 0), a.clone()))
                .collect(),
        }
    }
}

impl<T> FromIterator<(AdapterKey, Adapter<T>)> for AdapterSet<T> {
    fn from_iter<I: IntoIterator<Item = (AdapterKey, Adapter<T>)>>(iter: I) -> Self {
        AdapterSet {
            adapters: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn specs(i: usize, o: usize) -> Vec<AdapterSpec> {
        vec![
            AdapterSpec::new(AdapterKind::LowRank { rank: 2, scale: 1.0 }, i, o).unwrap(),
            AdapterSpec::new(AdapterKind::Linear, i, o).unwrap(),
            AdapterSpec::new(AdapterKind::Mlp { hidden: 5 }, i, o).unwrap(),
        ]
    }

    fn randomize(a: &mut Adapter<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = a
            .spec()
            .param_shapes()
            .iter()
            .map(|s| Tensor::uniform(s, 0.5, &mut rng).unwrap())
            .collect();
        a.set_params(params).unwrap();
    }

    #[test]
    fn spec_validation() {
        assert!(AdapterSpec::new(AdapterKind::LowRank { rank: 0, scale: 1.0 }, 4, 4).is_err());
        assert!(AdapterSpec::new(AdapterKind::LowRank { rank: 5, scale: 1.0 }, 4, 9).is_err());
        assert!(AdapterSpec::new(AdapterKind::Mlp { hidden: 0 }, 4, 4).is_err());
        assert!(AdapterSpec::new(AdapterKind::Linear, 0, 4).is_err());
    }

    #[test]
    fn low_rank_parameter_count_for_linear_mnist() {
        let s = AdapterSpec::new(AdapterKind::low_rank(), 784, 10).unwrap();
        assert_eq!(s.param_count(), 6352);
    }

    #[test]
    fn fresh_adapters_output_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[6, 4], 3.0, &mut rng).unwrap();
        for spec in specs(4, 3) {
            let a = Adapter::<f64>::init(spec, 1).unwrap();
            let out = a.apply(&x).unwrap();
            assert_eq!(out.shape(), &[6, 3]);
            assert!(out.data().iter().all(|&v| v == 0.0), "{:?}", spec.kind);
        }
    }

    #[test]
    fn init_is_seeded() {
        let spec = specs(4, 3)[0];
        let a = Adapter::<f64>::init(spec, 9).unwrap();
        let b = Adapter::<f64>::init(spec, 9).unwrap();
        let c = Adapter::<f64>::init(spec, 10).unwrap();
        assert_eq!(a.params()[0], b.params()[0]);
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let spec = AdapterSpec::new(AdapterKind::Linear, 3, 3).unwrap();
        let a = Adapter::from_params(spec, vec![Tensor::<f64>::identity(3).unwrap()]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(a.apply(&x).unwrap(), x);
        assert!(a.apply(&Tensor::zeros(&[1, 4]).unwrap()).is_err());
    }

    #[test]
    fn low_rank_matches_dense_product() {
        let spec = AdapterSpec::new(AdapterKind::LowRank { rank: 3, scale: 0.7 }, 6, 5).unwrap();
        let mut a = Adapter::<f64>::init(spec, 0).unwrap();
        randomize(&mut a, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[7, 6], 1.0, &mut rng).unwrap();
        // oracle: 0.7 · x (B A)ᵀ computed entry by entry
        let (p_a, p_b) = (&a.params()[0], &a.params()[1]);
        let mut expected = vec![0.0; 7 * 5];
        for n in 0..7 {
            for o in 0..5 {
                let mut acc = 0.0;
                for r in 0..3 {
                    for i in 0..6 {
                        acc += p_b.data()[o * 3 + r] * p_a.data()[r * 6 + i] * x.data()[n * 6 + i];
                    }
                }
                expected[n * 5 + o] = 0.7 * acc;
            }
        }
        let out = a.apply(&x).unwrap();
        for (u, v) in out.data().iter().zip(&expected) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn merge_rules() {
        let theta = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let [low, lin, mlp]: [AdapterSpec; 3] = specs(4, 3).try_into().unwrap();

        let mut zero = Adapter::<f64>::init(lin, 0).unwrap();
        let merged = zero.merge(&theta, 1.0).unwrap();
        assert_eq!(merged, theta);
        assert!(matches!(zero.merge(&theta, 1.0), Err(Error::AlreadyMerged)));
        zero.unmerge(&merged, 1.0).unwrap();
        assert!(matches!(zero.unmerge(&merged, 1.0), Err(Error::NotMerged)));

        let mut m = Adapter::<f64>::init(mlp, 0).unwrap();
        assert!(matches!(m.merge(&theta, 1.0), Err(Error::NotMergeable { kind: "mlp" })));

        let mut lr = Adapter::<f64>::init(low, 0).unwrap();
        randomize(&mut lr, 2);
        let hat = lr.merge(&theta, 0.5).unwrap();
        let back = lr.unmerge(&hat, 0.5).unwrap();
        assert!(back.max_abs_diff(&theta).unwrap() <= 1e-12);
        assert!(lr.merge(&Tensor::zeros(&[4, 3]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn fit_with_zero_gradient_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut rng).unwrap();
        let zero = Tensor::<f64>::zeros(&[5, 3]).unwrap();
        for spec in specs(4, 3) {
            let mut a = Adapter::<f64>::init(spec, 0).unwrap();
            randomize(&mut a, 3);
            let before = a.clone();
            let mut st = OptimizerState::new(OptimizerSpec::Sgd);
            a.fit(&x, &zero, &[0.5, 0.5], &mut st).unwrap();
            assert_eq!(a, before);
        }
    }

    #[test]
    fn fit_rejects_empty_and_mismatched_buffers() {
        let spec = specs(4, 3)[1];
        let mut a = Adapter::<f64>::init(spec, 0).unwrap();
        let mut st = OptimizerState::new(OptimizerSpec::Sgd);
        assert!(matches!(a.fit_step(&[], 0.1, 1, &mut st), Err(Error::EmptyBuffer)));
        let x = Tensor::<f64>::zeros(&[2, 4]).unwrap();
        assert!(a.fit(&x, &Tensor::zeros(&[2, 2]).unwrap(), &[0.1], &mut st).is_err());
        assert!(a.fit(&Tensor::zeros(&[2, 5]).unwrap(), &Tensor::zeros(&[2, 3]).unwrap(), &[0.1], &mut st).is_err());
    }

    #[test]
    fn aux_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::uniform(&[6, 4], 1.0, &mut rng).unwrap();
        let grad = Tensor::<f64>::uniform(&[6, 3], 1.0, &mut rng).unwrap();
        for spec in specs(4, 3) {
            let mut a = Adapter::<f64>::init(spec, 0).unwrap();
            randomize(&mut a, 6);
            let analytic = a.aux_gradients(&x, &grad).unwrap();
            let target = a.apply(&x).unwrap().sub(&grad).unwrap();
            let loss = |params: Vec<Tensor<f64>>| {
                let b = Adapter::from_params(spec, params).unwrap();
                let d = b.apply(&x).unwrap().sub(&target).unwrap();
                d.data().iter().map(|v| v * v).sum::<f64>() / 12.0
            };
            for (pi, p) in a.params().iter().enumerate() {
                for j in 0..p.len() {
                    let bump = |h: f64| {
                        let mut ps = a.params().to_vec();
                        let mut d = ps[pi].to_vec();
                        d[j] += h;
                        ps[pi] = Tensor::new(p.shape().to_vec(), d).unwrap();
                        loss(ps)
                    };
                    let num = (bump(1e-5) - bump(-1e-5)) / 2e-5;
                    assert!((analytic[pi].data()[j] - num).abs() < 1e-8, "{:?}", spec.kind);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn merge_unmerge_round_trip(seed in 0u64..1000, alpha in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = Tensor::<f64>::uniform(&[5, 6], 1.0, &mut rng).unwrap();
            for spec in &specs(6, 5)[..2] {
                let mut a = Adapter::<f64>::init(*spec, seed).unwrap();
                randomize(&mut a, rng.gen());
                let hat = a.merge(&theta, alpha).unwrap();
                let back = a.unmerge(&hat, alpha).unwrap();
                prop_assert!(back.max_abs_diff(&theta).unwrap() <= 1e-12);
            }
        }
    }
}
