//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "ASYMPRCK"
//! version  u32 LE
//! config   u64 LE length + UTF-8 JSON of ModelConfig
//! count    u32 LE number of tensors
//! tensor   u32 name length, name, u32 ndim, ndim x u64 dims, numel x f64 LE
//! ```
//!
//! Values are stored as `f64` regardless of the in-memory scalar type, so an
//! `f64` model round-trips bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::{layout, ModelWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ASYMPRCK";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(w: &ModelWeights<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&w.config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = w.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelWeights<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let expected = layout(&config);
    let mut expected_list = Vec::new();
    expected.visit(|name, shape| expected_list.push((name.to_string(), shape.clone())));
    let count = r.u32()? as usize;
    if count != expected_list.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected_list.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected_list {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Format(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        if &shape != want_shape {
            return Err(Error::Format(format!("tensor `{name}` has shape {shape:?}, expected {want_shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let mut it = tensors.into_iter();
    let params = expected.map(|_, _| it.next().expect("count checked"));
    Ok(ModelWeights { config, params })
}

pub fn save<T: Scalar>(w: &ModelWeights<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let bytes = to_bytes(w)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ModelWeights<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}
