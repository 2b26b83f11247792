//! Checkpoint container.
//!
//! Layout: the 8-byte magic `RACCKPT1`, the header length as a little-endian
//! `u64`, a UTF-8 TOML header, then every array as little-endian `f64` values.
//! The header carries `[checkpoint]` (format version, kind), free-form
//! metadata sections, and `[arrays]`, mapping each array name to
//! `"<d0>x<d1>...@<byte offset>"`. Arrays are stored in name order, so offsets
//! are strictly increasing and contiguous. Nothing time-dependent is written,
//! so equal models give equal files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::neural::{Parameters, Tensor};

pub const MAGIC: &[u8; 8] = b"RACCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Table,
    pub arrays: BTreeMap<String, Tensor>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_section<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let v = Value::try_from(value).map_err(|e| fmt_err(format!("cannot encode section [{name}]: {e}")))?;
        self.meta.insert(name.to_string(), v);
        Ok(())
    }

    pub fn section<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let v = self
            .meta
            .get(name)
            .ok_or_else(|| fmt_err(format!("checkpoint header lacks section [{name}]")))?;
        v.clone()
            .try_into()
            .map_err(|e| fmt_err(format!("checkpoint section [{name}] is malformed: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(fmt_err(format!("checkpoint holds a '{}' model, expected '{kind}'", self.kind)));
        }
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| fmt_err(format!("checkpoint is missing array '{name}'")))
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn put_params<P: Parameters>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.tensors() {
            self.arrays.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrites `params` with the arrays stored under `prefix`; shapes must match.
    pub fn fill_params<P: Parameters>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let key = format!("{prefix}{name}");
            let src = self.array(&key)?;
            if src.shape() != t.shape() {
                return Err(fmt_err(format!(
                    "array '{key}' has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Table::new();
        let mut info = Table::new();
        info.insert("format_version".into(), Value::Integer(FORMAT_VERSION as i64));
        info.insert("kind".into(), Value::String(self.kind.clone()));
        info.insert("created_by".into(), Value::String(format!("rac {}", env!("CARGO_PKG_VERSION"))));
        header.insert("checkpoint".into(), Value::Table(info));
        for (k, v) in &self.meta {
            if k == "checkpoint" || k == "arrays" {
                return Err(Error::Usage(format!("header section name '{k}' is reserved")));
            }
            header.insert(k.clone(), v.clone());
        }
        let mut manifest = Table::new();
        let mut offset = 0usize;
        for (name, t) in &self.arrays {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.insert(name.clone(), Value::String(format!("{}@{offset}", shape.join("x"))));
            offset += t.len() * 8;
        }
        header.insert("arrays".into(), Value::Table(manifest));
        let text = toml::to_string(&header).map_err(|e| fmt_err(format!("cannot render header: {e}")))?;

        let mut out = Vec::with_capacity(16 + text.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt_err("not a checkpoint file (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt_err("checkpoint header is truncated"))?;
        let text = std::str::from_utf8(&bytes[16..header_end]).map_err(|_| fmt_err("checkpoint header is not UTF-8"))?;
        let mut header: Table = text.parse().map_err(|e| fmt_err(format!("checkpoint header does not parse: {e}")))?;

        let info = match header.remove("checkpoint") {
            Some(Value::Table(t)) => t,
            _ => return Err(fmt_err("checkpoint header lacks [checkpoint]")),
        };
        let version = info
            .get("format_version")
            .and_then(Value::as_integer)
            .ok_or_else(|| fmt_err("checkpoint header lacks format_version"))?;
        if version != FORMAT_VERSION as i64 {
            return Err(Error::UnsupportedVersion {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: FORMAT_VERSION,
            });
        }
        let kind = info
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| fmt_err("checkpoint header lacks kind"))?
            .to_string();
        let manifest = match header.remove("arrays") {
            Some(Value::Table(t)) => t,
            None => Table::new(),
            _ => return Err(fmt_err("[arrays] must be a table")),
        };

        let payload = &bytes[header_end..];
        let mut arrays = BTreeMap::new();
        let mut expected = 0usize;
        for (name, entry) in &manifest {
            let entry = entry
                .as_str()
                .ok_or_else(|| fmt_err(format!("manifest entry for '{name}' is not a string")))?;
            let (shape, offset) = entry
                .split_once('@')
                .ok_or_else(|| fmt_err(format!("manifest entry for '{name}' lacks an offset")))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fmt_err(format!("manifest shape for '{name}' is malformed")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| fmt_err(format!("manifest offset for '{name}' is malformed")))?;
            if offset != expected {
                return Err(fmt_err(format!("manifest offset for '{name}' is not contiguous")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(fmt_err(format!("checkpoint is truncated: array '{name}' is missing")));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name.clone(), Tensor::from_vec(&shape, data).map_err(|e| fmt_err(format!("array '{name}': {e}")))?);
            expected = end;
        }
        if expected != payload.len() {
            return Err(fmt_err("checkpoint has trailing bytes after the last array"));
        }
        Ok(Checkpoint { kind, meta: header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test");
        c.set_section("dims", &BTreeMap::from([("hidden", 4usize)])).unwrap();
        c.arrays.insert("a".into(), Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.arrays.insert("b".into(), Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (k, t) in &c.arrays {
            let u = &back.arrays[k];
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_names_the_array() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap().replace("format_version = 1", "format_version = 99");
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::UnsupportedVersion { found: 99, .. })));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT________"), Err(Error::Format(_))));
    }
}
