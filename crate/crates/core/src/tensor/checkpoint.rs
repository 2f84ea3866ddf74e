//! Checkpoint format: `<stem>.manifest` is UTF-8 text with one line per tensor,
//! `name<TAB>d0,d1,...<TAB>offset`, where offset counts 8-byte values into
//! `<stem>.bin`. The blob holds every tensor as little-endian `f64` in
//! row-major order, concatenated in manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{numel, Result, Tensor, TensorError};
use crate::scalar::Scalar;

const HEADER: &str = "# relgate-checkpoint v1";

pub type NamedTensor<S> = (String, Tensor<S>);

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (
        stem.with_file_name(format!("{name}.manifest")),
        stem.with_file_name(format!("{name}.bin")),
    )
}

pub fn write_checkpoint<'a, S: Scalar>(
    stem: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>,
) -> Result<()> {
    let (manifest_path, blob_path) = paths(stem);
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.contains(['\t', '\n']) {
            return Err(TensorError::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{offset}\n", dims.join(",")));
        for v in t.data() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        offset += t.numel();
    }
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::File::create(&manifest_path)?.write_all(manifest.as_bytes())?;
    fs::File::create(&blob_path)?.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(stem: &Path) -> Result<Vec<NamedTensor<S>>> {
    let (manifest_path, blob_path) = paths(stem);
    let manifest = fs::read_to_string(&manifest_path)?;
    let blob = fs::read(&blob_path)?;
    if blob.len() % 8 != 0 {
        return Err(TensorError::Checkpoint(format!(
            "{}: blob length {} is not a multiple of 8",
            blob_path.display(),
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| TensorError::Checkpoint(format!("{}:{}: {msg}", manifest_path.display(), lineno + 1));
        let mut parts = line.split('\t');
        let (Some(name), Some(dims), Some(off), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected name, shape and offset"));
        };
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
        let n = numel(&shape);
        let slice = values.get(off..off + n).ok_or_else(|| bad("tensor extends past end of blob"))?;
        out.push((name.to_string(), Tensor::from_f64(&shape, slice)?));
    }
    Ok(out)
}
