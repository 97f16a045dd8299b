//! Binary adapter checkpoints.
//!
//! Layout (little-endian): magic `COLA`, version `u32`, tensor count `u32`, then
//! per tensor: name length `u32`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64),
//! rank `u32`, each extent as `u64`, raw data.
//!
//! Adapter tensors are named `{layer}.{user}.{kind}.{param}`; low-rank
//! adapters carry an extra `{layer}.{user}.lowrank.scale` tensor of shape `[1]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adapter::{Adapter, AdapterKey, AdapterKind, AdapterSet, AdapterSpec};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"COLA";
pub const VERSION: u32 = 1;

pub fn encode_tensors<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadCheckpointMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::InvalidSpec("checkpoint tensor name is not UTF-8".into()))?;
        let code = r.take(1, "dtype")?[0];
        let found = DType::from_code(code)
            .map(|d| d.name().to_string())
            .unwrap_or_else(|| format!("code {code}"));
        if code != T::DTYPE.code() {
            return Err(Error::DTypeMismatch {
                expected: T::DTYPE.name(),
                found,
            });
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64("extent")?).map_err(|_| Error::Truncated("extent"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated("data"))?;
        let size = T::DTYPE.size();
        let raw = r.take(n.checked_mul(size).ok_or(Error::Truncated("data"))?, "data")?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidSpec("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

fn adapter_tensors<T: Scalar>(key: AdapterKey, a: &Adapter<T>, out: &mut Vec<(String, Tensor<T>)>) {
    let kind = a.spec().kind.name();
    for (name, p) in a.spec().param_names().iter().zip(a.params()) {
        out.push((format!("{}.{}.{kind}.{name}", key.layer, key.user), p.clone()));
    }
    if let AdapterKind::LowRank { scale, .. } = a.spec().kind {
        out.push((
            format!("{}.{}.lowrank.scale", key.layer, key.user),
            Tensor::new(vec![1], vec![T::of(scale)]).expect("one value"),
        ));
    }
}

pub fn encode_adapters<T: Scalar>(adapters: &AdapterSet<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    for (key, a) in adapters.iter() {
        adapter_tensors(*key, a, &mut tensors);
    }
    encode_tensors(&tensors)
}

pub fn encode_adapter<T: Scalar>(key: AdapterKey, adapter: &Adapter<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    adapter_tensors(key, adapter, &mut tensors);
    encode_tensors(&tensors)
}

fn bad(name: &str) -> Error {
    Error::InvalidSpec(format!("unexpected checkpoint tensor `{name}`"))
}

pub fn decode_adapters<T: Scalar>(bytes: &[u8]) -> Result<AdapterSet<T>> {
    let mut groups: BTreeMap<AdapterKey, (String, BTreeMap<String, Tensor<T>>)> = BTreeMap::new();
    for (name, t) in decode_tensors::<T>(bytes)? {
        let parts: Vec<&str> = name.split('.').collect();
        let [m, k, kind, param] = parts[..] else {
            return Err(bad(&name));
        };
        let key = AdapterKey::new(m.parse().map_err(|_| bad(&name))?, k.parse().map_err(|_| bad(&name))?);
        let entry = groups.entry(key).or_insert_with(|| (kind.to_string(), BTreeMap::new()));
        if entry.0 != kind {
            return Err(bad(&name));
        }
        entry.1.insert(param.to_string(), t);
    }
    let mut set = AdapterSet::new();
    for (key, (kind, mut tensors)) in groups {
        let mut take = |p: &str| {
            tensors
                .remove(p)
                .ok_or_else(|| Error::InvalidSpec(format!("adapter {key} is missing `{p}`")))
        };
        let (spec, params) = match kind.as_str() {
            "lowrank" => {
                let a = take("A")?;
                let b = take("B")?;
                let scale = take("scale")?.item().as_f64();
                let (rank, i) = a.dims2("checkpoint")?;
                let (o, _) = b.dims2("checkpoint")?;
                (AdapterSpec::new(AdapterKind::LowRank { rank, scale }, i, o)?, vec![a, b])
            }
            "linear" => {
                let w = take("W")?;
                let (o, i) = w.dims2("checkpoint")?;
                (AdapterSpec::new(AdapterKind::Linear, i, o)?, vec![w])
            }
            "mlp" => {
                let w1 = take("W1")?;
                let b1 = take("b1")?;
                let w2 = take("W2")?;
                let b2 = take("b2")?;
                let (hidden, i) = w1.dims2("checkpoint")?;
                let (o, _) = w2.dims2("checkpoint")?;
                (AdapterSpec::new(AdapterKind::Mlp { hidden }, i, o)?, vec![w1, b1, w2, b2])
            }
            other => return Err(bad(other)),
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(extra));
        }
        set.insert(key, Adapter::from_params(spec, params)?);
    }
    Ok(set)
}

pub fn save_checkpoint<T: Scalar>(adapters: &AdapterSet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_adapters(adapters))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AdapterSet<T>> {
    decode_adapters(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    fn sample() -> AdapterSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = AdapterSet::new();
        let kinds = [
            AdapterKind::LowRank { rank: 2, scale: 0.5 },
            AdapterKind::Linear,
            AdapterKind::Mlp { hidden: 3 },
        ];
        for (m, kind) in kinds.into_iter().enumerate() {
            for k in 0..2 {
                let spec = AdapterSpec::new(kind, 4, 3).unwrap();
                let params = spec
                    .param_shapes()
                    .iter()
                    .map(|s| Tensor::uniform(s, 1.0, &mut rng).unwrap())
                    .collect();
                set.insert(AdapterKey::new(m, k), Adapter::from_params(spec, params).unwrap());
            }
        }
        set
    }

    #[test]
    fn round_trip_is_hash_identical() {
        let set = sample();
        let bytes = encode_adapters(&set);
        let back = decode_adapters::<f64>(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(Sha256::digest(encode_adapters(&back)), Sha256::digest(&bytes));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cola");
        save_checkpoint(&set, &path).unwrap();
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), set);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_adapters(&AdapterSet::<f32>::new());
        assert_eq!(bytes, [b'C', b'O', b'L', b'A', 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(decode_adapters::<f32>(&bytes).unwrap().is_empty());

        let t = Tensor::<f32>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_tensors(&[("x".to_string(), t)]);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'x');
        assert_eq!(bytes[17], 0);
        assert_eq!(&bytes[18..22], &1u32.to_le_bytes());
        assert_eq!(&bytes[22..30], &2u64.to_le_bytes());
        assert_eq!(&bytes[30..34], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 38);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_adapters(&sample());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_adapters::<f64>(&wrong), Err(Error::BadCheckpointMagic { .. })));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        let err = decode_adapters::<f64>(&bumped).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 2, expected: 1 }));
        assert!(err.to_string().contains("version 2"));
        assert!(matches!(decode_adapters::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(decode_adapters::<f32>(&bytes), Err(Error::DTypeMismatch { .. })));
    }
}
