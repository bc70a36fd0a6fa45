//! Staged output files. Everything a command writes goes to temporary files
//! next to its destination and is moved into place only when the command
//! succeeds; otherwise the temporaries and any directories created for them
//! are removed.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::CliError;

#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
    created_dirs: Vec<PathBuf>,
    committed: bool,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<(), CliError> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        for d in missing.into_iter().rev() {
            std::fs::create_dir(&d).map_err(|e| CliError::io(format!("cannot create {}", d.display()), e))?;
            self.created_dirs.push(d);
        }
        Ok(())
    }

    /// Stages `contents` as the new content of `path`.
    pub fn write(&mut self, path: impl AsRef<Path>, contents: &[u8]) -> Result<(), CliError> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        self.ensure_dir(&dir)?;
        let mut tmp = NamedTempFile::new_in(&dir)
            .map_err(|e| CliError::io(format!("cannot stage {}", path.display()), e))?;
        tmp.write_all(contents)
            .and_then(|_| tmp.flush())
            .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Stages `path` with `rows` appended. A new file starts with `header`;
    /// an existing file must already start with exactly that header. An
    /// empty header (JSON-lines files) skips the check.
    pub fn append(&mut self, path: impl AsRef<Path>, header: &str, rows: &str) -> Result<(), CliError> {
        let path = path.as_ref();
        let mut contents = match std::fs::read_to_string(path) {
            Ok(existing) => {
                let first = existing.lines().next().unwrap_or("");
                if !header.is_empty() && first != header.trim_end() {
                    return Err(CliError::Data(format!(
                        "{} has a different schema; refusing to append",
                        path.display()
                    )));
                }
                existing
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => header.to_string(),
            Err(e) => return Err(CliError::io(format!("cannot read {}", path.display()), e)),
        };
        if !contents.is_empty() && !contents.ends_with('\n') {
            contents.push('\n');
        }
        contents.push_str(rows);
        self.write(path, contents.as_bytes())
    }

    /// Moves every staged file into place and returns the destinations.
    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let mut done = Vec::with_capacity(self.files.len());
        for (tmp, dest) in std::mem::take(&mut self.files) {
            tmp.persist(&dest)
                .map_err(|e| CliError::io(format!("cannot write {}", dest.display()), e.error))?;
            done.push(dest);
        }
        self.committed = true;
        Ok(done)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        self.files.clear();
        for d in self.created_dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_vanish() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("a/b/file.txt");
        {
            let mut s = Staged::new();
            s.write(&target, b"x").unwrap();
        }
        assert!(!root.path().join("a").exists());
        let mut s = Staged::new();
        s.write(&target, b"x").unwrap();
        s.commit().unwrap();
        assert_eq!(std::fs::read(&target).unwrap(), b"x");
    }

    #[test]
    fn append_checks_header() {
        let root = tempfile::tempdir().unwrap();
        let p = root.path().join("t.csv");
        let mut s = Staged::new();
        s.append(&p, "a,b\n", "1,2\n").unwrap();
        s.commit().unwrap();
        let mut s = Staged::new();
        s.append(&p, "a,b\n", "3,4\n").unwrap();
        s.commit().unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,2\n3,4\n");
        let mut s = Staged::new();
        assert!(matches!(s.append(&p, "a,c\n", "5,6\n"), Err(CliError::Data(_))));
    }
}
