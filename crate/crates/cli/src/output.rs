//! Output files are written to a scratch directory next to their final
//! location and moved into place only once every file is complete.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::error::CliError;

pub struct Staging {
    out: PathBuf,
    scratch: TempDir,
    names: Vec<String>,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        let scratch = tempfile::Builder::new().prefix(".coco-staging-").tempdir_in(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            scratch,
            names: Vec::new(),
        })
    }

    /// Scratch path for `name`; the file is moved on `commit`.
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.names.push(name.to_string());
        self.scratch.path().join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(path, contents)?;
        Ok(())
    }

    /// Moves every staged file into the output directory and returns the
    /// final paths. The scratch directory is removed either way.
    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut finals = Vec::with_capacity(self.names.len());
        for name in &self.names {
            let target = self.out.join(name);
            fs::rename(self.scratch.path().join(name), &target)?;
            finals.push(target);
        }
        Ok(finals)
    }
}
