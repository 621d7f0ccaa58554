//! Checkpoint archive: named f64 arrays with a shape manifest, shared by the
//! feature extractor, generator, and discriminator.
//!
//! Layout: a text preamble (`magic`, key=value metadata, `arrays N`), then per
//! array (sorted by name) a name line, a dims line, and the raw little-endian
//! f64 payload.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "egopath-ckpt-v1";

pub fn save(path: &Path, store: &ParamStore, meta: &[(String, String)]) -> Result<()> {
    let mut entries: Vec<(&str, &Tensor)> = store.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (k, v) in meta {
        if k.contains('\n') || v.contains('\n') || k.contains('=') {
            return Err(Error::Checkpoint(format!("bad metadata key/value '{k}'")));
        }
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.extend_from_slice(format!("arrays {}\n", entries.len()).as_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(name.as_bytes());
        out.push(b'\n');
        let dims: Vec<String> = tensor.dims().iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(dims.join(" ").as_bytes());
        out.push(b'\n');
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Vec<(String, String)>)> {
    let bytes = std::fs::read(path)?;
    let mut cursor = 0usize;
    let line = |cursor: &mut usize| -> Result<String> {
        let start = *cursor;
        while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
            *cursor += 1;
        }
        if *cursor >= bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = std::str::from_utf8(&bytes[start..*cursor])
            .map_err(|_| Error::Checkpoint("non-utf8 header".into()))?
            .to_string();
        *cursor += 1;
        Ok(s)
    };

    if line(&mut cursor)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut meta = Vec::new();
    let count: usize;
    loop {
        let l = line(&mut cursor)?;
        if let Some(n) = l.strip_prefix("arrays ") {
            count = n.parse().map_err(|_| Error::Checkpoint("bad array count".into()))?;
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{l}'")))?;
        meta.push((k.to_string(), v.to_string()));
    }

    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = line(&mut cursor)?;
        let dims_line = line(&mut cursor)?;
        let dims: Vec<usize> = dims_line
            .split(' ')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad dims '{dims_line}'"))))
            .collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let end = cursor + n * 8;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("array '{name}' payload truncated")));
        }
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;
        store.add(&name, Tensor::new(dims, data));
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after arrays".into()));
    }
    Ok((store, meta))
}

/// Hex digest of a checkpoint file (reproducibility checks).
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
