//! Small filesystem helpers shared by the writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CsnnError, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CsnnError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| CsnnError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| CsnnError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CsnnError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CsnnError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CsnnError::io(path, e))
}

pub fn write_atomic_str(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
