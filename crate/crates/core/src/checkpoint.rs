//! Flat binary tensor archive with a text manifest.
//!
//! Layout:
//!
//! ```text
//! JEPARL-CKPT 1\n
//! tensor <name> <shape> <offset> <count>\n   (one per tensor)
//! meta <key> <value>\n                      (one per entry)
//! data\n
//! <payload>
//! ```
//!
//! `shape` is dimensions joined by `x` (`64x192`). `offset` is the byte
//! offset of the tensor inside the payload and `count` its element count.
//! The payload is a concatenation of little-endian IEEE-754 `f32` values.
//! Names and keys contain no whitespace; a meta value runs to the end of its
//! line and contains no newline. Exact `f64` and integer state goes into
//! meta entries as decimal or hexadecimal bit patterns.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "JEPARL-CKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    /// Insertion order is kept so files are reproducible.
    tensors: Vec<(String, Tensor)>,
    meta: BTreeMap<String, String>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(bad(format!("invalid name {name:?}")));
    }
    Ok(())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        check_name(name)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(bad(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        self.tensors.push((
            name.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        ));
        Ok(())
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_name(key)?;
        let value = value.to_string();
        if value.contains(['\n', '\r']) {
            return Err(bad(format!("meta {key}: value contains a newline")));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    /// Tensor data, checked against an expected element count.
    pub fn tensor_data(&self, name: &str, len: usize) -> Result<&[f32]> {
        let t = self.tensor(name)?;
        if t.data.len() != len {
            return Err(bad(format!(
                "tensor {name} has {} values, expected {len}",
                t.data.len()
            )));
        }
        Ok(&t.data)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing meta {key}")))
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| bad(format!("meta {key}: cannot parse {v:?}")))
    }

    /// Exact `f64` stored as its bit pattern.
    pub fn put_f64(&mut self, key: &str, v: f64) -> Result<()> {
        self.put_meta(key, format!("{:016x}", v.to_bits()))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.meta(key)?;
        u64::from_str_radix(v, 16)
            .map(f64::from_bits)
            .map_err(|_| bad(format!("meta {key}: bad f64 bits {v:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n");
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!(
                "tensor {name} {} {offset} {}\n",
                shape.join("x"),
                t.data.len()
            ));
            offset += 4 * t.data.len();
        }
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let mut entries = Vec::new();
        let mut meta = BTreeMap::new();
        loop {
            let line = next_line()?;
            if line == "data" {
                break;
            }
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad manifest line {line:?}")))?;
            match kind {
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    }
                    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
                    let shape = f[1].split('x').map(num).collect::<Result<Vec<_>>>()?;
                    entries.push((f[0].to_string(), shape, num(f[2])?, num(f[3])?));
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                _ => return Err(bad(format!("unknown manifest entry {kind:?}"))),
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0usize;
        for (name, shape, offset, count) in entries {
            if shape.iter().product::<usize>() != count || offset != expected_offset {
                return Err(bad(format!("tensor {name}: inconsistent shape, count or offset")));
            }
            let end = offset + 4 * count;
            if end > payload.len() {
                return Err(bad(format!("tensor {name} runs past the end of the payload")));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor { shape, data }));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Archive { tensors, meta })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
