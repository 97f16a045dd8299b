//! First-order optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Sgd,
    #[serde(rename = "adamw")]
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerSpec {
    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerSpec::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

impl Default for OptimizerSpec {
    /// AdamW with weight decay 5e-4.
    fn default() -> Self {
        OptimizerSpec::adamw(5e-4)
    }
}

/// Per-parameter optimizer state. Lives wherever the parameters are updated,
/// which for offloaded adapters is the worker that owns them.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    spec: OptimizerSpec,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(spec: OptimizerSpec) -> Self {
        OptimizerState {
            spec,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Number of scalars held as optimizer state.
    pub fn state_len(&self) -> usize {
        self.first.iter().chain(&self.second).map(Vec::len).sum()
    }

    /// Apply one update in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.steps += 1;
        match self.spec {
            OptimizerSpec::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = p.zip_map(g, |w, d| w - lr * d)?;
                }
            }
            OptimizerSpec::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
                    self.second = self.first.clone();
                }
                let (b1, b2, eps, wd) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(weight_decay));
                let t = self.steps as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    let mut data = p.to_vec();
                    for (j, (w, &d)) in data.iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * d;
                        v[j] = b2 * v[j] + (T::one() - b2) * d * d;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w = *w - lr * wd * *w - lr * mhat / (vhat.sqrt() + eps);
                    }
                    *p = Tensor::new(p.shape().to_vec(), data)?;
                }
            }
        }
        Ok(())
    }
}

/// Learning rate as a function of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero over the run.
    Cosine,
    /// Linear warm-up over `warmup` (fraction of the run), then linear decay to zero.
    Linear { warmup: f64 },
}

impl LrSchedule {
    /// Rate at 0-based iteration `t` of `total`.
    pub fn rate(&self, base: f64, t: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let t = t as f64;
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos()),
            LrSchedule::Linear { warmup } => {
                let warm = (warmup * total).ceil();
                if t < warm {
                    base * (t + 1.0) / warm
                } else {
                    base * ((total - t) / (total - warm).max(1.0)).max(0.0)
                }
            }
        }
    }
}
