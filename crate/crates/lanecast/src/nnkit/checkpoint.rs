//! Checkpoint file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RSCK" | version u16 | count u32
//! per entry (sorted by name):
//!   name_len u16 | name utf-8 | trainable u8 | ndim u8 | dims u32*ndim | data f32*numel
//! crc32 u32   (over everything after the version field)
//! ```
//!
//! A reserved `_meta.run` entry carries the run's config hash and seed so
//! every checkpoint can name the run that produced it. It is optional on
//! load: stores that never registered it simply skip it.

use std::fs;
use std::path::Path;

use super::store::ParamStore;
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 4] = b"RSCK";
const VERSION: u16 = 1;
const META_NAME: &str = "_meta.run";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMeta {
    pub config_hash: u32,
    pub seed: u64,
}

impl RunMeta {
    /// Six exactly-representable u16 halves; avoids bit-casting integers
    /// through NaN space.
    fn to_tensor(self) -> Tensor {
        let h = self.config_hash;
        let s = self.seed;
        Tensor::from_vec(vec![
            (h & 0xFFFF) as f32,
            (h >> 16) as f32,
            (s & 0xFFFF) as f32,
            ((s >> 16) & 0xFFFF) as f32,
            ((s >> 32) & 0xFFFF) as f32,
            ((s >> 48) & 0xFFFF) as f32,
        ])
    }

    fn from_tensor(t: &Tensor) -> Option<RunMeta> {
        let d = t.data();
        if d.len() != 6 {
            return None;
        }
        let u = |i: usize| d[i] as u64 & 0xFFFF;
        Some(RunMeta {
            config_hash: (u(0) | (u(1) << 16)) as u32,
            seed: u(2) | (u(3) << 16) | (u(4) << 32) | (u(5) << 48),
        })
    }
}

fn push_entry(buf: &mut Vec<u8>, name: &str, trainable: bool, t: &Tensor) -> Result<(), NnError> {
    if name.len() > u16::MAX as usize {
        return Err(NnError::Graph(format!("parameter name too long: {name:?}")));
    }
    if t.shape().len() > u8::MAX as usize {
        return Err(NnError::Graph(format!("parameter rank too high: {name:?}")));
    }
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(trainable as u8);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn save_checkpoint(
    store: &ParamStore,
    path: impl AsRef<Path>,
    meta: Option<RunMeta>,
) -> Result<(), NnError> {
    let mut payload = Vec::new();
    let count = store.len() + usize::from(meta.is_some() && !store.contains(META_NAME));
    payload.extend_from_slice(&(count as u32).to_le_bytes());
    if let Some(meta) = meta {
        if !store.contains(META_NAME) {
            push_entry(&mut payload, META_NAME, false, &meta.to_tensor())?;
        }
    }
    for (name, p) in store.iter() {
        push_entry(&mut payload, name, p.trainable, &p.value)?;
    }
    let mut file = Vec::with_capacity(payload.len() + 10);
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&VERSION.to_le_bytes());
    file.extend_from_slice(&payload);
    file.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    let path = path.as_ref();
    let tmp = path.with_extension("rsck.tmp");
    fs::write(&tmp, &file)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
}

struct Entry {
    name: String,
    trainable: bool,
    tensor: Tensor,
}

fn read_entries(path: &Path) -> Result<Vec<Entry>, NnError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 10 {
        return Err(NnError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(NnError::BadVersion(version));
    }
    let payload = &bytes[6..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored_crc {
        return Err(NnError::Checksum);
    }
    let mut cur = Cursor {
        buf: payload,
        pos: 0,
    };
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| NnError::Graph("checkpoint entry name is not utf-8".into()))?
            .to_string();
        let trainable = cur.u8()? != 0;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            name,
            trainable,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if cur.pos != payload.len() {
        return Err(NnError::Graph("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

/// Loads values and trainable flags into an existing store. Entry names must
/// match the store exactly in both directions (the reserved `_meta.*` space
/// excepted), and shapes must agree.
pub fn load_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<(), NnError> {
    let entries = read_entries(path.as_ref())?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if e.name.starts_with("_meta.") && !store.contains(&e.name) {
            continue;
        }
        if !store.contains(&e.name) {
            return Err(NnError::UnexpectedEntry(e.name.clone()));
        }
        let expected = store.tensor(&e.name)?.shape().to_vec();
        if expected != e.tensor.shape() {
            return Err(NnError::CheckpointShape {
                name: e.name.clone(),
                found: e.tensor.shape().to_vec(),
                expected,
            });
        }
        seen.insert(e.name.clone());
    }
    for name in store.names() {
        if !seen.contains(name) {
            return Err(NnError::MissingEntry(name.clone()));
        }
    }
    for e in entries {
        if e.name.starts_with("_meta.") && !store.contains(&e.name) {
            continue;
        }
        store.set_value(&e.name, e.tensor)?;
        let t = e.trainable;
        store.set_trainable_where(|n| n == e.name, t);
    }
    Ok(())
}

/// Reads only the run metadata, if the checkpoint recorded any.
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<Option<RunMeta>, NnError> {
    let entries = read_entries(path.as_ref())?;
    Ok(entries
        .iter()
        .find(|e| e.name == META_NAME)
        .and_then(|e| RunMeta::from_tensor(&e.tensor)))
}
