use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Converts a serde_json error into a parse error carrying the byte offset.
pub(crate) fn json_error(path: &Path, text: &[u8], err: serde_json::Error) -> Error {
    let (line, column) = (err.line(), err.column());
    let mut offset = 0usize;
    if line > 0 {
        let mut current = 1usize;
        for (i, &c) in text.iter().enumerate() {
            if current == line {
                offset = i + column.saturating_sub(1);
                break;
            }
            if c == b'\n' {
                current += 1;
            }
        }
        offset = offset.min(text.len());
    }
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        line,
        column,
        message: err.to_string(),
    }
}
