//! Checkpoint directories: `manifest.json` describing named tensors stored
//! back to back in `tensors.bin`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use vidpred_tensor::{Real, Tensor};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    format: u32,
    dtype: String,
    meta: M,
    tensors: Vec<Entry>,
}

/// Writes `meta` and `tensors` into `dir`, replacing any previous content.
/// The directory is assembled next to `dir` and renamed into place.
pub fn write_bundle<F: Real, M: Serialize>(dir: &Path, meta: &M, tensors: &[(String, &Tensor<F>)]) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut bin = BufWriter::new(File::create(tmp.join(TENSORS))?);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let bytes = t.to_bytes();
        bin.write_all(&bytes)?;
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: bytes.len() as u64,
        });
        offset += bytes.len() as u64;
    }
    bin.flush()?;
    drop(bin);
    let manifest = Manifest {
        format: FORMAT,
        dtype: format!("{:?}", F::DTYPE),
        meta,
        tensors: entries,
    };
    fs::write(tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle<F: Real, M: DeserializeOwned>(dir: &Path) -> Result<(M, Vec<(String, Tensor<F>)>)> {
    let manifest: Manifest<M> = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("checkpoint format {} is not {FORMAT}", manifest.format)));
    }
    let bin = fs::read(dir.join(TENSORS))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let bytes = usize::try_from(e.offset)
            .ok()
            .zip(usize::try_from(e.offset + e.len).ok())
            .and_then(|(a, b)| bin.get(a..b))
            .ok_or_else(|| Error::Format(format!("tensor {} lies outside {TENSORS}", e.name)))?;
        let t = Tensor::<F>::from_bytes(bytes)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("tensor {} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
        }
        out.push((e.name, t));
    }
    Ok((manifest.meta, out))
}
