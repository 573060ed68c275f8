use std::fs;
use std::path::{Path, PathBuf};

use super::PipelineError;

/// Outputs of one step, written under a scratch directory and moved into
/// the workspace on [`Staging::commit`]. Dropping an uncommitted staging area
/// deletes everything it holds and leaves the workspace as it was.
pub(crate) struct Staging {
    root: PathBuf,
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Staging {
    pub(crate) fn new(root: &Path, step: &str) -> Result<Self, PipelineError> {
        let dir = root.join(format!(".staging-{step}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            root: root.to_path_buf(),
            dir,
            files: Vec::new(),
        })
    }

    pub(crate) fn write(&mut self, rel: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_path_buf());
        }
        Ok(())
    }

    pub(crate) fn commit(mut self) -> Result<(), PipelineError> {
        for rel in std::mem::take(&mut self.files) {
            let dst = self.root.join(&rel);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(self.dir.join(&rel), &dst)?;
        }
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}
