//! Adaptation data shipped from the base device to the adapter owners.

use crate::adapter::AdapterKey;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hidden inputs and per-sample gradients of one adapter's rows at one iteration.
///
/// `grad` holds `∂ℓ_i/∂Δh` for each row `i`, the gradient of that sample's own
/// loss with respect to the adapter output. Fitting an adapter on the mean
/// auxiliary loss over these rows therefore reproduces the mean task-loss
/// gradient over the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationRecord<T> {
    pub layer: usize,
    pub user: usize,
    pub input: Tensor<T>,
    pub grad: Tensor<T>,
    pub iteration: usize,
}

impl<T: Scalar> AdaptationRecord<T> {
    pub fn key(&self) -> AdapterKey {
        AdapterKey::new(self.layer, self.user)
    }

    pub fn rows(&self) -> usize {
        self.input.shape()[0]
    }

    /// Payload size in bytes.
    pub fn bytes(&self) -> usize {
        (self.input.len() + self.grad.len()) * T::DTYPE.size()
    }
}

/// Records of one adapter awaiting the next adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    records: Vec<AdaptationRecord<T>>,
    samples: usize,
}

impl<T> Default for Buffer<T> {
    fn default() -> Self {
        Buffer {
            records: Vec::new(),
            samples: 0,
        }
    }
}

impl<T: Scalar> Buffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: AdaptationRecord<T>) -> Result<()> {
        if let Some(last) = self.records.last() {
            if last.key() != record.key() {
                return Err(Error::Offload(format!(
                    "record for {} pushed into buffer of {}",
                    record.key(),
                    last.key()
                )));
            }
            if record.iteration < last.iteration {
                return Err(Error::Offload("records must arrive in iteration order".into()));
            }
        }
        self.samples += record.rows();
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[AdaptationRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Buffered rows across all records.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn drain(&mut self) -> Vec<AdaptationRecord<T>> {
        self.samples = 0;
        std::mem::take(&mut self.records)
    }
}
