//! Base networks with designated fine-tunable affine layers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{Adapter, AdapterKey, AdapterSet, ParamMode};
use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MNIST_INPUTS: usize = 784;
pub const MNIST_CLASSES: usize = 10;
pub const DEFAULT_MLP_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Affine,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub fine_tunable: bool,
}

impl LayerSpec {
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Affine,
            in_dim,
            out_dim,
            fine_tunable: true,
        }
    }

    pub fn relu(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
            fine_tunable: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Preset {
    /// One affine layer `in → classes`.
    Linear { inputs: usize, classes: usize },
    /// `in → width → width → classes` with ReLU between affine layers.
    Mlp {
        inputs: usize,
        width: usize,
        classes: usize,
    },
}

impl Preset {
    pub fn mnist_linear() -> Self {
        Preset::Linear {
            inputs: MNIST_INPUTS,
            classes: MNIST_CLASSES,
        }
    }

    pub fn mnist_mlp() -> Self {
        Preset::Mlp {
            inputs: MNIST_INPUTS,
            width: DEFAULT_MLP_WIDTH,
            classes: MNIST_CLASSES,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        match *self {
            Preset::Linear { inputs, classes } => vec![LayerSpec::affine(inputs, classes)],
            Preset::Mlp {
                inputs,
                width,
                classes,
            } => vec![
                LayerSpec::affine(inputs, width),
                LayerSpec::relu(width),
                LayerSpec::affine(width, width),
                LayerSpec::relu(width),
                LayerSpec::affine(width, classes),
            ],
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Preset::Linear { inputs, classes } => format!("linear {inputs}->{classes}"),
            Preset::Mlp {
                inputs,
                width,
                classes,
            } => format!("mlp {inputs}->{width}->{width}->{classes} (relu)"),
        }
    }
}

/// Weight `out×in` and bias `[out]` of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<T> {
    layers: Vec<LayerSpec>,
    params: Vec<Option<AffineParams<T>>>,
    tunable: Vec<usize>,
    frozen: bool,
}

/// How the adapters of a forward pass enter the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPath {
    /// Parameters are leaves (classical backprop).
    Trainable,
    /// Parameters are constants; gradients flow through adapter outputs.
    Through,
    /// Outputs are constants (stop-gradient at `Δh`).
    Detached,
}

/// Options of [`BaseModel::forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardSpec<'a, T> {
    pub adapters: Option<&'a AdapterSet<T>>,
    pub alpha: T,
    pub path: AdapterPath,
    /// Owning user of each batch row; `None` means every row belongs to user 0.
    pub owners: Option<&'a [usize]>,
    /// Replacement parameters for the fine-tunable layers (merged weights).
    pub weights: Option<&'a [AffineParams<T>]>,
    /// Record base parameters as leaves.
    pub base_trainable: bool,
    /// Tap `(x_m, ĥ_m)` at every fine-tunable layer.
    pub taps: bool,
}

impl<'a, T: Scalar> ForwardSpec<'a, T> {
    pub fn plain() -> Self {
        ForwardSpec {
            adapters: None,
            alpha: T::one(),
            path: AdapterPath::Through,
            owners: None,
            weights: None,
            base_trainable: false,
            taps: false,
        }
    }

    pub fn with_adapters(adapters: &'a AdapterSet<T>, alpha: T, path: AdapterPath) -> Self {
        ForwardSpec {
            adapters: Some(adapters),
            alpha,
            path,
            ..Self::plain()
        }
    }
}

/// A recorded forward pass ready for `backward`.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub logits: ValueId,
    pub adapter_params: BTreeMap<AdapterKey, Vec<ValueId>>,
    /// `(weight, bias)` ids per fine-tunable layer when `base_trainable`.
    pub base_params: Vec<(ValueId, ValueId)>,
}

impl<T: Scalar> BaseModel<T> {
    /// Affine weights `~ U(±1/√in)`, biases zero.
    pub fn from_layers(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len());
        let mut tunable = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::InvalidSpec(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(Error::InvalidSpec(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.in_dim,
                    layers[i - 1].out_dim
                )));
            }
            match l.kind {
                LayerKind::Affine => {
                    let bound = 1.0 / (l.in_dim as f64).sqrt();
                    params.push(Some(AffineParams {
                        weight: Tensor::uniform(&[l.out_dim, l.in_dim], bound, &mut rng)?,
                        bias: Tensor::zeros(&[l.out_dim])?,
                    }));
                    if l.fine_tunable {
                        tunable.push(i);
                    }
                }
                LayerKind::Relu => {
                    if l.fine_tunable {
                        return Err(Error::InvalidSpec(format!(
                            "activation layer {i} cannot be fine-tunable"
                        )));
                    }
                    if l.in_dim != l.out_dim {
                        return Err(Error::InvalidSpec(format!("activation layer {i} changes width")));
                    }
                    params.push(None);
                }
            }
        }
        Ok(BaseModel {
            layers,
            params,
            tunable,
            frozen: true,
        })
    }

    pub fn preset(preset: Preset, seed: u64) -> Result<Self> {
        Self::from_layers(preset.layers(), seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Number of fine-tunable layers `M`.
    pub fn tunable_count(&self) -> usize {
        self.tunable.len()
    }

    /// `(in, out)` of fine-tunable layer `m`.
    pub fn tunable_dims(&self, m: usize) -> Result<(usize, usize)> {
        let &i = self
            .tunable
            .get(m)
            .ok_or_else(|| Error::InvalidSpec(format!("no fine-tunable layer {m}")))?;
        Ok((self.layers[i].in_dim, self.layers[i].out_dim))
    }

    /// Parameters of fine-tunable layer `m`.
    pub fn tunable_params(&self, m: usize) -> Result<&AffineParams<T>> {
        self.tunable_dims(m)?;
        Ok(self.params[self.tunable[m]].as_ref().expect("affine layer"))
    }

    pub fn tunable_weights(&self) -> Vec<AffineParams<T>> {
        self.tunable
            .iter()
            .map(|&i| self.params[i].clone().expect("affine layer"))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Replace the parameters of fine-tunable layer `m` (only while unfrozen).
    pub fn set_tunable_params(&mut self, m: usize, params: AffineParams<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidSpec("cannot update a frozen model".into()));
        }
        let (i, o) = self.tunable_dims(m)?;
        if params.weight.shape() != [o, i] || params.bias.shape() != [o] {
            return Err(Error::shape("set_tunable_params", "parameter shapes changed"));
        }
        let idx = self.tunable[m];
        self.params[idx] = Some(params);
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every parameter, hex encoded.
    pub fn theta_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().flatten() {
            h.update(p.weight.to_le_bytes());
            h.update(p.bias.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Check that every adapter fits the layer it is attached to.
    pub fn check_adapters(&self, adapters: &AdapterSet<T>) -> Result<()> {
        for (key, a) in adapters.iter() {
            let (i, o) = self.tunable_dims(key.layer)?;
            if a.spec().in_dim != i || a.spec().out_dim != o {
                return Err(Error::shape(
                    "adapter",
                    format!(
                        "adapter {key} is {}→{}, layer is {i}→{o}",
                        a.spec().in_dim,
                        a.spec().out_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Record a forward pass of `x` on a fresh tape.
    ///
    /// At fine-tunable layer `m`: `ĥ_m = θ_m x_m + b_m + α·Σ_k g_{m,k}(x_m)` with
    /// each user's adapter applied only to the rows that user owns.
    pub fn forward_on_tape(&self, x: &Tensor<T>, spec: &ForwardSpec<'_, T>) -> Result<ForwardPass<T>> {
        let (n, width) = x.dims2("forward")?;
        if width != self.in_dim() {
            return Err(Error::shape(
                "forward",
                format!("input width {width}, model expects {}", self.in_dim()),
            ));
        }
        if let Some(w) = spec.weights {
            if w.len() != self.tunable.len() {
                return Err(Error::shape("forward", "merged weights do not cover every layer"));
            }
        }
        let routes = match spec.adapters {
            Some(a) => {
                self.check_adapters(a)?;
                Some(Routes::new(spec.owners, n, a.users().max(1))?)
            }
            None => {
                if let Some(o) = spec.owners {
                    if o.len() != n {
                        return Err(Error::shape("forward", "owner count differs from batch size"));
                    }
                }
                None
            }
        };

        let mut tape = Tape::new();
        let mut cur = tape.constant(x.clone());
        let mut adapter_params = BTreeMap::new();
        let mut base_params = Vec::new();
        let mut m = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Relu => cur = tape.relu(cur)?,
                LayerKind::Affine => {
                    let tunable = layer.fine_tunable;
                    let p = match (tunable, spec.weights) {
                        (true, Some(w)) => &w[m],
                        _ => self.params[i].as_ref().expect("affine layer"),
                    };
                    let (w_id, b_id) = if spec.base_trainable && tunable {
                        let ids = (tape.param(p.weight.clone()), tape.param(p.bias.clone()));
                        base_params.push(ids);
                        ids
                    } else {
                        (tape.constant(p.weight.clone()), tape.constant(p.bias.clone()))
                    };
                    let h = tape.matmul_t(cur, w_id)?;
                    let mut out = tape.add(h, b_id)?;
                    if tunable {
                        if let (Some(adapters), Some(routes)) = (spec.adapters, routes.as_ref()) {
                            if let Some(delta) =
                                routes.delta(&mut tape, adapters, m, cur, spec.path, &mut adapter_params)?
                            {
                                let scaled = tape.scale(delta, spec.alpha)?;
                                out = tape.add(out, scaled)?;
                            }
                        }
                        if spec.taps {
                            out = tape.tap_layer(cur, out, m)?;
                        }
                        m += 1;
                    }
                    cur = out;
                }
            }
        }
        Ok(ForwardPass {
            tape,
            logits: cur,
            adapter_params,
            base_params,
        })
    }

    /// Logits for `x` with optional unmerged adapters on user 0.
    pub fn forward(&self, x: &Tensor<T>, adapters: Option<&AdapterSet<T>>, alpha: T) -> Result<Tensor<T>> {
        let spec = ForwardSpec {
            adapters,
            alpha,
            ..ForwardSpec::plain()
        };
        let pass = self.forward_on_tape(x, &spec)?;
        Ok(pass.tape.value(pass.logits)?.clone())
    }

    /// Mean cross-entropy and classical backprop gradients of every adapter.
    pub fn classical_gradients(
        &self,
        adapters: &AdapterSet<T>,
        x: &Tensor<T>,
        labels: &[usize],
        owners: Option<&[usize]>,
        alpha: T,
    ) -> Result<ClassicalGrads<T>> {
        if !self.frozen {
            return Err(Error::ModelNotFrozen);
        }
        let spec = ForwardSpec {
            owners,
            ..ForwardSpec::with_adapters(adapters, alpha, AdapterPath::Trainable)
        };
        let mut pass = self.forward_on_tape(x, &spec)?;
        let correct = count_correct(pass.tape.value(pass.logits)?, labels);
        let loss = pass.tape.softmax_cross_entropy(pass.logits, labels)?;
        let value = pass.tape.value(loss)?.item();
        let grads = pass.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (key, a) in adapters.iter() {
            let g = match pass.adapter_params.get(key) {
                Some(ids) => ids
                    .iter()
                    .zip(a.params())
                    .map(|(&id, p)| grads.get_or_zeros(id, p))
                    .collect(),
                None => a
                    .params()
                    .iter()
                    .map(|p| Tensor::zeros(p.shape()))
                    .collect::<Result<_>>()?,
            };
            out.insert(*key, g);
        }
        Ok(ClassicalGrads {
            loss: value,
            correct,
            grads: out,
        })
    }

    /// One ordinary backprop step on the adapter parameters; `θ` is untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn classical_step(
        &self,
        adapters: &mut AdapterSet<T>,
        x: &Tensor<T>,
        labels: &[usize],
        owners: Option<&[usize]>,
        alpha: T,
        states: &mut BTreeMap<AdapterKey, OptimizerState<T>>,
        lr: T,
    ) -> Result<ClassicalGrads<T>> {
        let out = self.classical_gradients(adapters, x, labels, owners, alpha)?;
        for (key, g) in &out.grads {
            let adapter = adapters.get_mut(key).expect("key from this set");
            let state = states
                .get_mut(key)
                .ok_or_else(|| Error::InvalidSpec(format!("no optimizer state for adapter {key}")))?;
            let mut params = adapter.params().to_vec();
            state.step(&mut params, g, lr)?;
            adapter.set_params(params)?;
        }
        Ok(out)
    }
}

/// Loss, correct predictions and per-adapter gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalGrads<T> {
    pub loss: T,
    pub correct: usize,
    pub grads: BTreeMap<AdapterKey, Vec<Tensor<T>>>,
}

/// Rows whose arg-max logit equals the label (first maximum wins ties).
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count()
}

/// Row partition of a batch by owning user.
struct Routes {
    n: usize,
    /// Rows of each user; `None` when one user owns the whole batch.
    by_user: Option<Vec<Vec<usize>>>,
    only: usize,
}

impl Routes {
    fn new(owners: Option<&[usize]>, n: usize, users: usize) -> Result<Self> {
        let Some(owners) = owners else {
            return Ok(Routes {
                n,
                by_user: None,
                only: 0,
            });
        };
        if owners.len() != n {
            return Err(Error::shape(
                "route",
                format!("{} owners for {n} rows", owners.len()),
            ));
        }
        let mut by_user = vec![Vec::new(); users];
        for (row, &k) in owners.iter().enumerate() {
            if k >= users {
                return Err(Error::UnknownOwner { owner: k, users });
            }
            by_user[k].push(row);
        }
        let nonempty: Vec<usize> = (0..users).filter(|&k| !by_user[k].is_empty()).collect();
        if nonempty.len() == 1 {
            return Ok(Routes {
                n,
                by_user: None,
                only: nonempty[0],
            });
        }
        Ok(Routes {
            n,
            by_user: Some(by_user),
            only: 0,
        })
    }

    /// `Σ_k g_{m,k}` on each user's rows, or `None` when no adapter applies.
    fn delta<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        adapters: &AdapterSet<T>,
        m: usize,
        x: ValueId,
        path: AdapterPath,
        ids: &mut BTreeMap<AdapterKey, Vec<ValueId>>,
    ) -> Result<Option<ValueId>> {
        let mode = match path {
            AdapterPath::Trainable => ParamMode::Trainable,
            _ => ParamMode::Frozen,
        };
        let mut run = |tape: &mut Tape<T>, key: AdapterKey, a: &Adapter<T>, input: ValueId| -> Result<ValueId> {
            if path == AdapterPath::Detached {
                let out = a.apply(tape.value(input)?)?;
                Ok(tape.constant(out))
            } else {
                let (out, pids) = a.apply_on_tape(tape, input, mode)?;
                ids.insert(key, pids);
                Ok(out)
            }
        };
        match &self.by_user {
            None => {
                let key = AdapterKey::new(m, self.only);
                match adapters.get(&key) {
                    Some(a) => Ok(Some(run(tape, key, a, x)?)),
                    None => Ok(None),
                }
            }
            Some(by_user) => {
                let mut parts = Vec::new();
                let mut rows = Vec::new();
                for (k, idx) in by_user.iter().enumerate() {
                    let key = AdapterKey::new(m, k);
                    if idx.is_empty() {
                        continue;
                    }
                    if let Some(a) = adapters.get(&key) {
                        let xs = tape.gather_rows(x, idx)?;
                        parts.push(run(tape, key, a, xs)?);
                        rows.push(idx.clone());
                    }
                }
                if parts.is_empty() {
                    return Ok(None);
                }
                Ok(Some(tape.scatter_rows(&parts, &rows, self.n)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterKind, AdapterSpec};
    use crate::optim::OptimizerSpec;

    fn toy() -> BaseModel<f64> {
        BaseModel::from_layers(
            vec![
                LayerSpec::affine(5, 4),
                LayerSpec::relu(4),
                LayerSpec::affine(4, 4),
                LayerSpec::relu(4),
                LayerSpec::affine(4, 3),
            ],
            7,
        )
        .unwrap()
    }

    fn adapters_for(model: &BaseModel<f64>, kind: AdapterKind, users: usize) -> AdapterSet<f64> {
        let mut set = AdapterSet::new();
        for m in 0..model.tunable_count() {
            let (i, o) = model.tunable_dims(m).unwrap();
            for k in 0..users {
                let spec = AdapterSpec::new(kind, i, o).unwrap();
                let mut a = Adapter::init(spec, (m * 10 + k) as u64).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64((m * 31 + k) as u64);
                let ps = spec
                    .param_shapes()
                    .iter()
                    .map(|s| Tensor::uniform(s, 0.4, &mut rng).unwrap())
                    .collect();
                a.set_params(ps).unwrap();
                set.insert(AdapterKey::new(m, k), a);
            }
        }
        set
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn preset_sizes() {
        let lin = BaseModel::<f64>::preset(Preset::mnist_linear(), 0).unwrap();
        assert_eq!(lin.param_count(), 7850);
        assert_eq!(lin.tunable_count(), 1);
        let mlp = BaseModel::<f32>::preset(Preset::mnist_mlp(), 0).unwrap();
        assert_eq!(mlp.tunable_count(), 3);
        assert_eq!(mlp.layers().iter().filter(|l| l.kind == LayerKind::Affine).count(), 3);
    }

    #[test]
    fn invalid_layers_rejected() {
        assert!(BaseModel::<f64>::from_layers(vec![], 0).is_err());
        assert!(BaseModel::<f64>::from_layers(vec![LayerSpec::affine(3, 0)], 0).is_err());
        assert!(BaseModel::<f64>::from_layers(vec![LayerSpec::affine(3, 2), LayerSpec::affine(3, 2)], 0).is_err());
        let mut bad = LayerSpec::relu(3);
        bad.fine_tunable = true;
        assert!(BaseModel::<f64>::from_layers(vec![LayerSpec::affine(3, 3), bad], 0).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = BaseModel::<f64>::preset(Preset::mnist_linear(), 3).unwrap();
        let b = BaseModel::<f64>::preset(Preset::mnist_linear(), 3).unwrap();
        let c = BaseModel::<f64>::preset(Preset::mnist_linear(), 4).unwrap();
        assert_eq!(a.theta_hash(), b.theta_hash());
        assert_ne!(a.theta_hash(), c.theta_hash());
        let bound = 1.0 / 784f64.sqrt();
        let w = &a.tunable_params(0).unwrap().weight;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.tunable_params(0).unwrap().bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_affine() {
        let mut model = BaseModel::<f64>::from_layers(vec![LayerSpec::affine(3, 2)], 0).unwrap();
        model.set_frozen(false);
        model
            .set_tunable_params(
                0,
                AffineParams {
                    weight: Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap(),
                    bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
                },
            )
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let y = model.forward(&x, None, 1.0).unwrap();
        assert_eq!(y.data(), &[6.5, -1.0]);
    }

    #[test]
    fn zero_adapters_and_zero_alpha_are_bit_identical() {
        let model = toy();
        let x = batch(6, 5, 1);
        let base = model.forward(&x, None, 1.0).unwrap();
        for kind in [AdapterKind::LowRank { rank: 2, scale: 1.0 }, AdapterKind::Linear, AdapterKind::Mlp { hidden: 3 }] {
            let mut zero = AdapterSet::new();
            for m in 0..3 {
                let (i, o) = model.tunable_dims(m).unwrap();
                zero.insert(AdapterKey::new(m, 0), Adapter::init(AdapterSpec::new(kind, i, o).unwrap(), 5).unwrap());
            }
            assert_eq!(model.forward(&x, Some(&zero), 1.0).unwrap(), base);
            let nonzero = adapters_for(&model, kind, 1);
            assert_eq!(model.forward(&x, Some(&nonzero), 0.0).unwrap(), base);
            assert_ne!(model.forward(&x, Some(&nonzero), 1.0).unwrap(), base);
        }
    }

    #[test]
    fn adapter_dimension_mismatch() {
        let model = toy();
        let mut set = AdapterSet::new();
        set.insert(
            AdapterKey::new(0, 0),
            Adapter::init(AdapterSpec::new(AdapterKind::Linear, 4, 4).unwrap(), 0).unwrap(),
        );
        assert!(model.forward(&batch(2, 5, 0), Some(&set), 1.0).is_err());
        assert!(model.forward(&batch(2, 4, 0), None, 1.0).is_err());
        set = AdapterSet::new();
        set.insert(
            AdapterKey::new(7, 0),
            Adapter::init(AdapterSpec::new(AdapterKind::Linear, 4, 4).unwrap(), 0).unwrap(),
        );
        assert!(model.check_adapters(&set).is_err());
    }

    #[test]
    fn unknown_owner_rejected() {
        let model = toy();
        let set = adapters_for(&model, AdapterKind::Linear, 2);
        let spec = ForwardSpec {
            owners: Some(&[0, 1, 2]),
            ..ForwardSpec::with_adapters(&set, 1.0, AdapterPath::Through)
        };
        assert!(matches!(
            model.forward_on_tape(&batch(3, 5, 0), &spec),
            Err(Error::UnknownOwner { owner: 2, users: 2 })
        ));
    }

    #[test]
    fn classical_step_with_zero_lr_and_frozen_contract() {
        let model = toy();
        let hash = model.theta_hash();
        let mut set = adapters_for(&model, AdapterKind::LowRank { rank: 2, scale: 1.0 }, 1);
        let before = set.clone();
        let mut states: BTreeMap<_, _> = set.keys().map(|k| (k, OptimizerState::new(OptimizerSpec::Sgd))).collect();
        let x = batch(4, 5, 2);
        model.classical_step(&mut set, &x, &[0, 1, 2, 0], None, 1.0, &mut states, 0.0).unwrap();
        assert_eq!(set, before);
        model.classical_step(&mut set, &x, &[0, 1, 2, 0], None, 1.0, &mut states, 0.1).unwrap();
        assert_ne!(set, before);
        assert_eq!(model.theta_hash(), hash);

        let mut open = toy();
        open.set_frozen(false);
        assert!(matches!(
            open.classical_step(&mut set, &x, &[0, 1, 2, 0], None, 1.0, &mut states, 0.1),
            Err(Error::ModelNotFrozen)
        ));
    }

    #[test]
    fn low_rank_classical_gradient_matches_finite_differences() {
        let model = toy();
        let kind = AdapterKind::LowRank { rank: 2, scale: 0.8 };
        let set = adapters_for(&model, kind, 1);
        let x = batch(3, 5, 9);
        let labels = [2, 0, 1];
        let grads = model.classical_gradients(&set, &x, &labels, None, 1.0).unwrap().grads;
        let loss = |s: &AdapterSet<f64>| {
            let mut t = Tape::new();
            let logits = model.forward(&x, Some(s), 1.0).unwrap();
            let id = t.constant(logits);
            let l = t.softmax_cross_entropy(id, &labels).unwrap();
            t.value(l).unwrap().item()
        };
        for (key, a) in set.iter() {
            for (pi, p) in a.params().iter().enumerate() {
                for j in 0..p.len() {
                    let bump = |h: f64| {
                        let mut s = set.clone();
                        let mut ps = a.params().to_vec();
                        let mut d = ps[pi].to_vec();
                        d[j] += h;
                        ps[pi] = Tensor::new(p.shape().to_vec(), d).unwrap();
                        s.get_mut(key).unwrap().set_params(ps).unwrap();
                        loss(&s)
                    };
                    let num = (bump(1e-5) - bump(-1e-5)) / 2e-5;
                    let ana = grads[key][pi].data()[j];
                    assert!((ana - num).abs() <= 1e-6 * num.abs().max(1e-3), "{key} {pi} {j}: {ana} vs {num}");
                }
            }
        }
    }
}
