//! Versioned binary container of named arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CMCKPT\0\0"
//! version  u32
//! manifest u32 length + UTF-8 `key=value` lines
//! count    u32
//! record   u32 name length, name, u32 rank, rank × u64 dims, numel × f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CMCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest has no `{key}`")))
    }

    /// Parses a manifest value.
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest value `{key}={raw}` is malformed")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.arrays.push((name.into(), t));
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter of `store` as `{prefix}/{name}`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.cast());
        }
    }

    /// Adds tensors aligned with `store`'s parameters as `{prefix}/{name}`.
    pub fn push_aligned<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>, tensors: &[Tensor<T>]) {
        for ((_, name, _), t) in store.iter().zip(tensors) {
            self.push(format!("{prefix}/{name}"), t.cast());
        }
    }

    /// Tensors named `{prefix}/{name}` for every parameter of `store`, with
    /// matching shapes, in store order. Extra arrays under `prefix` are an
    /// error too.
    pub fn aligned<T: Scalar>(&self, prefix: &str, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            let key = format!("{prefix}/{name}");
            let a = self.array(&key).ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint is missing `{key}`; was it written for another model?"
                ))
            })?;
            if a.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint `{key}` has shape {:?}, model expects {:?}",
                    a.shape(),
                    t.shape()
                )));
            }
            out.push(a.cast());
        }
        let lead = format!("{prefix}/");
        let extra = self.arrays.iter().filter(|(n, _)| n.starts_with(&lead)).count();
        if extra != store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {extra} arrays under `{prefix}`, model has {}",
                store.len()
            )));
        }
        Ok(out)
    }

    /// Overwrites every parameter of `store` from `{prefix}/{name}`.
    pub fn restore_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let values = self.aligned(prefix, store)?;
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(values) {
            store.set(id, v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut manifest = String::new();
        for (k, v) in &self.manifest {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("manifest entry `{k}` cannot be encoded")));
            }
            manifest.push_str(&format!("{k}={v}\n"));
        }
        put_len(&mut out, manifest.len())?;
        out.extend_from_slice(manifest.as_bytes());
        put_len(&mut out, self.arrays.len())?;
        for (name, t) in &self.arrays {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line `{line}` has no `=`")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::Format(format!("array `{name}` is truncated")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, arrays })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Checkpoint::new();
        c.set("epoch", 7);
        c.set("note", "a b=c");
        c.push("w", Tensor::randn(&[3, 2, 2], 1.0, &mut rng));
        c.push("scalar", Tensor::new(&[], vec![f64::MIN_POSITIVE]).unwrap());
        c.push("special", Tensor::new(&[3], vec![-0.0, 1e308, 5e-324]).unwrap());
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        for ((na, a), (nb, b)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.parse::<usize>("epoch").unwrap(), 7);
        assert_eq!(back.get("note").unwrap(), "a b=c");
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let b = sample().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut ver = b.clone();
        ver[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Format(_))));
        for cut in [3, 12, 20, b.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut long = b;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn store_restore_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap();
        s.add("b", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        let mut c = Checkpoint::new();
        c.push_store("gen", &s);
        let mut other = ParamStore::<f32>::new();
        other.add("a", Tensor::zeros(&[2, 3])).unwrap();
        other.add("b", Tensor::zeros(&[4])).unwrap();
        c.restore_store("gen", &mut other).unwrap();
        assert_eq!(
            other.iter().map(|x| x.2.clone()).collect::<Vec<_>>(),
            s.iter().map(|x| x.2.clone()).collect::<Vec<_>>()
        );

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros(&[3, 2])).unwrap();
        wrong.add("b", Tensor::zeros(&[4])).unwrap();
        assert!(matches!(c.restore_store("gen", &mut wrong), Err(Error::Config(_))));
        let mut fewer = ParamStore::<f32>::new();
        fewer.add("a", Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(c.restore_store("gen", &mut fewer), Err(Error::Config(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes().unwrap(), c.to_bytes().unwrap());
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io(_))));
    }
}
