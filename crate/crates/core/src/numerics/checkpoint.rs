//! Self-describing binary container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SPKLABCK"
//! version    u32
//! kind       str       (u32 length + UTF-8)
//! config     str       JSON of the model configuration
//! hash       str       hex SHA-256 of the config JSON
//! meta       str       free-form JSON (training step, optimiser state, ...)
//! count      u32
//! count × { name: str, dtype: u8 (1 = f64, 2 = f32), ndim: u32, dims: u64 × ndim, payload }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPKLABCK";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub meta_json: String,
    pub arrays: Vec<(String, Tensor)>,
}

pub fn config_hash(config_json: &str) -> String {
    let digest = Sha256::digest(config_json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config_json: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            config_json: config_json.into(),
            meta_json: "{}".into(),
            arrays: Vec::new(),
        }
    }

    pub fn with_params(mut self, prefix: &str, params: &ParamStore) -> Self {
        for (_, p) in params.iter() {
            self.arrays.push((format!("{prefix}{}", p.name), p.value.clone()));
        }
        self
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Collects every array whose name starts with `prefix` into a store,
    /// stripping the prefix.
    pub fn params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.add(rest.to_string(), t.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config_json);
        put_str(&mut out, &config_hash(&self.config_json));
        put_str(&mut out, &self.meta_json);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let config_json = r.string()?;
        let hash = r.string()?;
        if hash != config_hash(&config_json) {
            return Err(Error::Format("config hash does not match config".into()));
        }
        let meta_json = r.string()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                DTYPE_F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
            };
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Checkpoint {
            kind,
            config_json,
            meta_json,
            arrays,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            kind in "[a-z_]{1,12}",
        ) {
            let n = values.len();
            let mut ck = Checkpoint::new(kind, r#"{"a":1}"#);
            ck.meta_json = r#"{"step":3}"#.into();
            ck.arrays.push(("w".into(), Tensor::new(vec![n], values.clone()).unwrap()));
            ck.arrays.push(("empty".into(), Tensor::zeros(&[0, 3])));
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            let got: Vec<u64> = back.array("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn tampered_config_is_rejected() {
        let ck = Checkpoint::new("teacher", r#"{"e":8}"#);
        let mut bytes = ck.to_bytes();
        // flip the '8' inside the config JSON
        let pos = bytes.iter().position(|&b| b == b'8').unwrap();
        bytes[pos] = b'9';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ck = Checkpoint::new("x", "{}");
        ck.arrays.push(("a".into(), Tensor::vector(vec![1.0, 2.0])));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let mut store = ParamStore::new();
        store.add("layer.w", Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 3.0]));
        let ck = Checkpoint::new("toy", "{}").with_params("model.", &store);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.params("model.");
        assert_eq!(restored.value(restored.id("layer.w").unwrap()), store.value(store.id("layer.w").unwrap()));
    }
}
