//! Self-describing parameter container shared by both training stages.
//!
//! Layout: the 8-byte magic `CLADCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then the tensor payload
//! as little-endian `f64` values in header order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

/// Generator position, enough to resume a `ChaCha8Rng` exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub step: usize,
    pub config: RunConfig,
    pub rng: Option<RngState>,
    /// Free-form extras such as normalization statistics and hashes.
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: usize,
    pub config: RunConfig,
    pub rng: Option<RngState>,
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: usize, config: &RunConfig) -> Self {
        Self {
            kind: kind.to_string(),
            step,
            config: config.clone(),
            rng: None,
            extra: serde_json::Value::Object(Default::default()),
            tensors: Vec::new(),
        }
    }

    pub fn set_extra(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value)?;
        self.extra
            .as_object_mut()
            .expect("extra is an object")
            .insert(key.to_string(), v);
        Ok(())
    }

    pub fn extra<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing extra field {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Appends every tensor of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Appends only the listed parameters.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore, ids: &[crate::autodiff::ParamId]) {
        for &id in ids {
            self.tensors.push((format!("{prefix}{}", store.name(id)), store.get(id).clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites parameters of `store` from entries under `prefix`.
    /// With `require_all`, every store parameter must be present.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore, require_all: bool) -> Result<usize> {
        let ids: Vec<_> = store.ids().collect();
        let mut loaded = 0;
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            match self.tensor(&name) {
                Some(t) if t.dim() == store.get(id).dim() => {
                    store.get_mut(id).assign(t);
                    loaded += 1;
                }
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        t.dim(),
                        store.get(id).dim()
                    )))
                }
                None if require_all => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                None => {}
            }
        }
        Ok(loaded)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    dtype: "f64".into(),
                    offset,
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        header.config.validate()?;
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let end = e.offset + n * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("{}: payload truncated", e.name)));
            }
            let vals = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_shape_vec((e.shape[0], e.shape[1]), vals).expect("shape matches length");
            tensors.push((e.name.clone(), t));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config: header.config,
            rng: header.rng,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Precondition(format!("no checkpoint at {}", path.display())));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_exact() {
        let cfg = RunConfig::desk();
        let mut store = ParamStore::new();
        store.add("a", array![[1.0 / 3.0, -2.5e-300]]);
        store.add("b", array![[f64::MAX], [0.1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let mut ck = Checkpoint::new("stage1", 17, &cfg);
        ck.put_store("", &store);
        ck.rng = Some(RngState::capture(&rng));
        ck.set_extra("note", [1, 2, 3]).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.rng.as_ref().unwrap().restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
        let mut other = store.clone();
        other.get_mut(other.id("a").unwrap()).fill(0.0);
        back.load_into("", &mut other, true).unwrap();
        assert_eq!(other.hash(), store.hash());
        assert_eq!(back.extra::<Vec<i32>>("note").unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::new("x", 0, &RunConfig::desk());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut store = ParamStore::new();
        store.add("missing", Tensor::zeros((1, 1)));
        assert!(ck.load_into("", &mut store, true).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/ck.bin")), Err(Error::Precondition(_))));
    }
}
