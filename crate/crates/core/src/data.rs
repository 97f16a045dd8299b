//! Datasets: MNIST IDX files and seeded gaussian blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub split: String,
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(name: &str, split: &str, inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = inputs.dims2("dataset")?;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            name: name.to_string(),
            split: split.to_string(),
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows at `idx` and their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.inputs.select_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Subset at `idx`, relabelled with `split`.
    pub fn subset(&self, idx: &[usize], split: &str) -> Result<Self> {
        let (x, y) = self.batch(idx)?;
        Self::new(&self.name, split, x, y, self.classes)
    }

    /// Rows `i` with `i % parts == part`.
    pub fn shard(&self, part: usize, parts: usize) -> Result<Self> {
        let idx: Vec<usize> = (part..self.len()).step_by(parts.max(1)).collect();
        if idx.is_empty() {
            return Err(Error::InvalidSpec(format!("shard {part} of {parts} is empty")));
        }
        self.subset(&idx, &self.split)
    }

    /// First `n` rows.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, &self.split)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

/// Row order for `epoch`: a permutation fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    idx.shuffle(&mut rng);
    idx
}

/// Consecutive batches of `batch` rows over `order`; the last may be short.
pub fn batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    let s = bytes.get(at..at + 4).ok_or(Error::Truncated(what))?;
    Ok(u32::from_be_bytes(s.try_into().expect("4 bytes")))
}

/// Decode IDX image bytes into `N×(rows·cols)` pixel intensities in `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let d = rows * cols;
    let body = bytes.get(16..16 + n * d).ok_or(Error::Truncated("image pixels"))?;
    let scale = T::one() / T::of(255.0);
    let data = body.iter().map(|&p| T::of(f64::from(p)) * scale).collect();
    Tensor::matrix(n, d, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "label header")? as usize;
    let body = bytes.get(8..8 + n).ok_or(Error::Truncated("labels"))?;
    Ok(body.iter().map(|&l| l as usize).collect())
}

pub fn load_mnist_idx<T: Scalar>(images: &Path, labels: &Path, split: &str) -> Result<Dataset<T>> {
    let x = parse_idx_images::<T>(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    if let Some(&bad) = y.iter().find(|&&l| l >= 10) {
        return Err(Error::LabelOutOfRange { label: bad, classes: 10 });
    }
    Dataset::new("mnist", split, x, y, 10)
}

/// `(train, test)` from the canonical file names under `dir`.
pub fn load_mnist_dir<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        "train",
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        "test",
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    /// Distance between any two class means (unit isotropic noise).
    pub separation: f64,
}

/// Gaussian blobs with class means `(s/√2)·e_c` on random orthonormal `e_c`,
/// so every pair of means is `s` apart. Rows are shuffled.
pub fn synth_dataset<T: Scalar>(spec: SynthSpec, seed: u64) -> Result<Dataset<T>> {
    let SynthSpec {
        classes,
        per_class,
        dims,
        separation,
    } = spec;
    if classes == 0 || per_class == 0 || dims == 0 {
        return Err(Error::InvalidSpec("synthetic data needs C, n, d ≥ 1".into()));
    }
    if classes > dims {
        return Err(Error::InvalidSpec(format!(
            "{classes} orthogonal class directions need at least {classes} dims"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while dirs.len() < classes {
        let mut v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let mut order: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(order.len() * dims);
    for &c in &order {
        for &u in &dirs[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(T::of(radius * u + z));
        }
    }
    let x = Tensor::matrix(order.len(), dims, data)?;
    Dataset::new("synthetic", "train", x, order, classes)
}

/// Draw one blob set and split it into `(train, test)`.
pub fn synth_split<T: Scalar>(spec: SynthSpec, test_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let all = synth_dataset::<T>(spec, seed)?;
    let n_test = ((all.len() as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(1, all.len() - 1);
    let train: Vec<usize> = (0..all.len() - n_test).collect();
    let test: Vec<usize> = (all.len() - n_test..all.len()).collect();
    Ok((all.subset(&train, "train")?, all.subset(&test, "test")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, px: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn idx_images_scale_and_validate() {
        let x = parse_idx_images::<f32>(&idx_images(1, &[0, 51, 255, 128])).unwrap();
        assert_eq!(x.shape(), &[1, 4]);
        assert_eq!(x.data()[2], 1.0);
        assert_eq!(x.data()[0], 0.0);
        assert!(matches!(
            parse_idx_images::<f32>(&idx_images(2, &[0, 0, 0, 0])),
            Err(Error::Truncated(_))
        ));
        let mut bad = idx_images(1, &[0; 4]);
        bad[3] = 0x01;
        let err = parse_idx_images::<f32>(&bad).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x801, .. }));
        assert!(err.to_string().contains("0x00000801"));
    }

    #[test]
    fn idx_labels_and_count_mismatch() {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 9]);
        assert!(parse_idx_labels(&b[..10]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, idx_images(1, &[1, 2, 3, 4])).unwrap();
        fs::write(&lp, &b).unwrap();
        assert!(matches!(
            load_mnist_idx::<f32>(&ip, &lp, "train"),
            Err(Error::CountMismatch { images: 1, labels: 3 })
        ));
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SynthSpec {
            classes: 4,
            per_class: 25,
            dims: 6,
            separation: 3.0,
        };
        let a = synth_dataset::<f64>(spec, 1).unwrap();
        let b = synth_dataset::<f64>(spec, 1).unwrap();
        assert_eq!(a.inputs.to_le_bytes(), b.inputs.to_le_bytes());
        assert_eq!(a.labels, b.labels);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 25);
        }
        assert!(synth_dataset::<f64>(SynthSpec { classes: 7, ..spec }, 1).is_err());
    }

    #[test]
    fn class_means_are_separated() {
        let spec = SynthSpec {
            classes: 3,
            per_class: 4000,
            dims: 5,
            separation: 4.0,
        };
        let d = synth_dataset::<f64>(spec, 2).unwrap();
        let mut means = vec![vec![0.0; 5]; 3];
        for (i, &l) in d.labels.iter().enumerate() {
            for (j, v) in d.inputs.row(i).iter().enumerate() {
                means[l][j] += v / 4000.0;
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((dist - 4.0).abs() < 0.15, "{dist}");
            }
        }
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(50, 3, 0);
        let b = epoch_order(50, 3, 1);
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 3, 0));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        let bs = batches(&a, 8);
        assert_eq!(bs.len(), 7);
        assert_eq!(bs[6].len(), 2);
    }
}
