//! Named-tensor checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    "MXNT"
//! version  u32
//! meta_len u32, then meta_len bytes of UTF-8 `key=value` lines (sorted)
//! count    u32
//! count x { name_len u32, name bytes, ndim u32, ndim x u32 dims, f32 payload }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;

pub const MAGIC: [u8; 4] = *b"MXNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `model`, in visit order.
    pub fn from_module(model: &dyn Module<f32>) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |p| {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                dims: p.value.dims().to_vec(),
                data: p.value.data().to_vec(),
            })
        });
        Checkpoint {
            metadata: BTreeMap::new(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims,
            data,
        });
    }

    /// Copies every parameter of `model` accepted by `filter` from this
    /// checkpoint. All shapes are checked, then presence, before anything is
    /// written, so a failed restore leaves `model` untouched.
    pub fn restore_filtered(&self, model: &mut dyn Module<f32>, filter: &dyn Fn(&str) -> bool) -> Result<()> {
        let index: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut wanted = Vec::new();
        model.visit(&mut |p| {
            if filter(&p.name) {
                wanted.push((p.name.clone(), p.value.dims().to_vec()));
            }
        });
        for (name, dims) in &wanted {
            if let Some(t) = index.get(name.as_str()) {
                if &t.dims != dims {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: dims.clone(),
                        found: t.dims.clone(),
                    });
                }
            }
        }
        if let Some((name, _)) = wanted.iter().find(|(n, _)| !index.contains_key(n.as_str())) {
            return Err(Error::MissingTensor(name.clone()));
        }
        model.visit_mut(&mut |p| {
            if filter(&p.name) {
                p.value.data_mut().copy_from_slice(&index[p.name.as_str()].data);
            }
        });
        Ok(())
    }

    pub fn restore(&self, model: &mut dyn Module<f32>) -> Result<()> {
        self.restore_filtered(model, &|_| true)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, d as u32);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::CorruptCheckpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptCheckpoint(format!("metadata line without `=`: {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors: Vec<NamedTensor> = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u32("dimension")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` has invalid dims {dims:?}")))?;
            let payload = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::CorruptCheckpoint("payload size overflows".into()))?,
                "payload",
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.iter().any(|t| t.name == name) {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor `{name}`")));
            }
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
