//! Run directories. Each invocation claims a fresh `run-NNN` directory so
//! earlier results are never overwritten, and every file is written to a
//! temporary name first and then renamed into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::Cell;
use crate::CliError;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Claims the first unused `run-NNN` below `parent`.
    pub fn create(parent: &Path) -> io::Result<Self> {
        fs::create_dir_all(parent)?;
        for i in 1..100_000 {
            let root = parent.join(format!("run-{i:03}"));
            match fs::create_dir(&root) {
                Ok(()) => return Ok(Self { root }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        Err(io::Error::other("no free run directory name"))
    }

    pub fn open(root: &Path) -> Result<Self, CliError> {
        if root.is_dir() {
            Ok(Self { root: root.to_path_buf() })
        } else {
            Err(CliError::Incomplete(vec![format!("run directory {}", root.display())]))
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn cell_dir(&self, cell: Cell, repetition: usize) -> PathBuf {
        self.root.join("cells").join(cell.id()).join(format!("rep-{repetition:03}"))
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp.{}.{}", std::process::id(), TMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Serializes `rows` as CSV and writes it atomically. The header comes from
/// the row type's field names; `header` is only used when `rows` is empty.
pub fn write_csv_rows<T: serde::Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() && !header.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_reuses_a_run_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::create(tmp.path()).unwrap();
        let b = RunDir::create(tmp.path()).unwrap();
        assert_ne!(a.path(), b.path());
        assert!(a.path().ends_with("run-001") && b.path().ends_with("run-002"));
        write_atomic(&a.join("x/y.txt"), b"hi").unwrap();
        assert_eq!(fs::read(a.join("x/y.txt")).unwrap(), b"hi");
        assert_eq!(fs::read_dir(a.join("x")).unwrap().count(), 1);
    }
}
