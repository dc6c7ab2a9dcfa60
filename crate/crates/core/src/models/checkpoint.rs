use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Real, StateEntry};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DRRFCKPT";

/// JSON sidecar stored next to every parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub method: String,
    pub epoch: usize,
    pub seed: u64,
    pub config: serde_json::Value,
    pub loss_history: BTreeMap<String, Vec<f64>>,
}

/// `<path>.json` next to the blob at `<path>`.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn collect<T: Real>(modules: &[(&str, &dyn Module<T>)]) -> Vec<StateEntry> {
    let mut out = Vec::new();
    for (name, m) in modules {
        m.visit(name, &mut |n, p| {
            out.push(StateEntry {
                name: n.to_string(),
                shape: p.value.shape().to_vec(),
                values: p.value.to_f64(),
            })
        });
    }
    out
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    modules: &[(&str, &dyn Module<T>)],
    meta: &CheckpointMeta,
) -> Result<()> {
    let entries = collect(modules);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.shape.len() as u64).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                reason: "truncated parameter blob".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("implausible length {v}"),
            })
    }
}

pub fn read_state(path: &Path) -> Result<Vec<StateEntry>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(malformed("not a checkpoint blob"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(malformed(&format!("unsupported format version {version}")));
    }
    let count = r.len()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| malformed("bad entry name"))?;
        let nd = r.len()?;
        let shape = (0..nd).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let total: usize = shape.iter().product();
        let bytes = r.take(total.checked_mul(8).ok_or_else(|| malformed("overflow"))?)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(StateEntry { name, shape, values });
    }
    if r.pos != buf.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(out)
}

pub fn read_meta(blob: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(blob);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Malformed {
            path: side,
            reason: format!("unsupported format version {}", meta.format_version),
        });
    }
    Ok(meta)
}

/// Loads a blob into modules built with the same configuration.
pub fn load_checkpoint<T: Real>(
    path: &Path,
    modules: &mut [(&str, &mut dyn Module<T>)],
) -> Result<CheckpointMeta> {
    let meta = read_meta(path)?;
    let state = read_state(path)?;
    let mut offset = 0;
    for (name, m) in modules.iter_mut() {
        let prefix = format!("{name}.");
        let n = state[offset..]
            .iter()
            .take_while(|e| e.name.starts_with(&prefix))
            .count();
        let part: Vec<StateEntry> = state[offset..offset + n]
            .iter()
            .map(|e| StateEntry {
                name: e.name[prefix.len()..].to_string(),
                ..e.clone()
            })
            .collect();
        m.load_state(&part).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{name}: {e}"),
        })?;
        offset += n;
    }
    if offset != state.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} unused entries", state.len() - offset),
        });
    }
    Ok(meta)
}
