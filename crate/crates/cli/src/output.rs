use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

/// A sibling staging directory that is renamed onto the output directory
/// once every file is written. Dropped without `commit`, it is removed.
pub struct Staging {
    dir: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self, Failure> {
        if target.exists() {
            let empty = target.is_dir()
                && fs::read_dir(target)
                    .map_err(|e| Failure::io(target, e))?
                    .next()
                    .is_none();
            if !empty {
                return Err(Failure::config(format!(
                    "output directory {} already exists and is not empty",
                    target.display()
                )));
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| Failure::config(format!("bad output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Failure::io(&parent, e))?;
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| Failure::io(&dir, e))?;
        Ok(Staging {
            dir,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write(&self, file: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.path(file);
        fs::write(&p, bytes).map_err(|e| Failure::io(&p, e))
    }

    pub fn write_json<T: serde::Serialize>(&self, file: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Failure::other(format!("serializing {file}: {e}")))?;
        text.push('\n');
        self.write(file, text)
    }

    pub fn commit(mut self) -> Result<(), Failure> {
        if self.target.exists() {
            fs::remove_dir(&self.target).map_err(|e| Failure::io(&self.target, e))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| Failure::io(&self.target, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
