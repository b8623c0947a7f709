use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use nav_tensor::Tensor;

use super::{Arch, NetsError, Result};

pub const WEIGHTS_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"NAVW";

/// Named parameter arrays of one network, in layer order. Batchnorm running
/// statistics live here too, under `*.running_mean` / `*.running_var`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub arch: Arch,
    pub version: u16,
    entries: IndexMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            version: WEIGHTS_VERSION,
            entries: IndexMap::new(),
        }
    }

    /// Inserts or replaces an entry, keeping the original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| NetsError::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.get_mut(name).ok_or_else(|| NetsError::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// True for running statistics, which are state rather than parameters.
    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    pub fn parameter_count(&self) -> usize {
        self.iter().filter(|(n, _)| !Self::is_buffer(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn expect_arch(&self, arch: Arch) -> Result<()> {
        if self.arch != arch {
            return Err(NetsError::WrongArch {
                expected: arch,
                found: self.arch,
            });
        }
        Ok(())
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&encode(weights)?)?;
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub(crate) fn encode(weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&weights.version.to_le_bytes());
    buf.push(weights.arch.tag());
    buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| NetsError::Corrupt(format!("name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| NetsError::Corrupt(format!("rank of {name}")))?;
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| NetsError::Corrupt(format!("dimension of {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NetsError::Truncated(format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ModelWeights> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(NetsError::BadMagic(magic));
    }
    let version = cur.u16("version")?;
    if version != WEIGHTS_VERSION {
        return Err(NetsError::UnsupportedVersion(version));
    }
    let tag = cur.u8("architecture tag")?;
    let arch = Arch::from_tag(tag).ok_or(NetsError::UnknownTag(tag))?;
    let count = cur.u32("entry count")?;
    let mut weights = ModelWeights::new(arch);
    for i in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| NetsError::Corrupt(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| NetsError::Corrupt(format!("entry {name}: shape {shape:?} overflows")))?;
        let raw = cur.take(n, "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| NetsError::Corrupt(format!("entry {name}: {e}")))?;
        if weights.contains(&name) {
            return Err(NetsError::Corrupt(format!("duplicate entry {name:?}")));
        }
        weights.insert(name, tensor);
    }
    if cur.pos != bytes.len() {
        return Err(NetsError::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(weights)
}
