//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STCG1"
//! u32 meta_len, meta_len bytes of JSON (config, answers, vocabularies)
//! u32 param_count
//! per parameter, in name order:
//!   u32 name_len, name bytes, u8 trainable, u32 rank, rank × u64 dims,
//!   Π dims × f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Model, ModelMeta};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"STCG1";

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let meta = serde_json::to_vec(&model.meta())?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(p.trainable));
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = r.u32()?;
    let mut store = ParameterStore::new(meta.config.seed);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("parameter too large".into()))?)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store
            .insert(&name, Tensor::new(shape, data)?, trainable)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let model = Model::from_parts(meta, store)?;
    check_against_fresh(&model)?;
    Ok(model)
}

/// The stored parameters must be exactly those a fresh model with the same
/// config would create, with the same shapes.
fn check_against_fresh(model: &Model) -> Result<()> {
    let expected = model.expected_shapes()?;
    let found: Vec<(&str, &[usize])> = model.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
    for (name, shape) in &expected {
        match found.iter().find(|(n, _)| n == name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some((_, s)) if s != shape => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {s:?}, config implies {shape:?}"
                )))
            }
            _ => {}
        }
    }
    if let Some((n, _)) = found.iter().find(|(n, _)| !expected.iter().any(|(e, _)| e == n)) {
        return Err(Error::Checkpoint(format!("unexpected parameter {n}")));
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes to a sibling temporary file and renames it into place, so a
/// crash never leaves a partial checkpoint at `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
