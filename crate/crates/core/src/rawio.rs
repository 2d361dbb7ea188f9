//! Header-less little-endian float32 files shared by volumes, MPR stacks and
//! the dataset cache.

use crate::error::Result;
use std::fs;
use std::path::Path;

pub(crate) fn write_f32_le(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a raw float32 file. Returns `None` when the byte length is not a
/// multiple of four.
pub(crate) fn read_f32_le(path: &Path) -> Result<Option<Vec<f32>>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Ok(None);
    }
    Ok(Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()))
}

/// Resolves `rel` against the directory containing `anchor`.
pub(crate) fn sibling(anchor: &Path, rel: &str) -> std::path::PathBuf {
    anchor.parent().map(|p| p.join(rel)).unwrap_or_else(|| Path::new(rel).to_path_buf())
}
