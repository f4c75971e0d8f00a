//! On-disk formats. Every write goes to a temporary file in the destination
//! directory and is renamed into place, so readers never see a partial file.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod config;
pub mod image;
pub mod medium_file;
pub mod ply;
pub mod scene;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
