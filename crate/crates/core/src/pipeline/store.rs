//! Content-addressed storage of stage artifacts.
//!
//! Every artifact is a text blob (checkpoint or dataset CSV) stored under a
//! key derived from the hash of everything that produced it. Later stages
//! read earlier artifacts back from their text form only.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::Result;

#[derive(Debug, Default)]
pub struct StageStore {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, String>>,
}

impl StageStore {
    pub fn memory() -> Self {
        StageStore::default()
    }

    /// Mirrors every artifact into `dir` and reads existing files back, so a
    /// rerun resumes after the last completed stage.
    pub fn on_disk(dir: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(StageStore {
            dir: Some(dir.as_ref().to_path_buf()),
            mem: Mutex::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn path_of(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.txt")))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        if let Some(v) = self.mem.lock().expect("store lock").get(key) {
            return Ok(Some(v.clone()));
        }
        if let Some(p) = self.path_of(key) {
            if p.exists() {
                let text = std::fs::read_to_string(&p)?;
                self.mem
                    .lock()
                    .expect("store lock")
                    .insert(key.to_string(), text.clone());
                return Ok(Some(text));
            }
        }
        Ok(None)
    }

    pub fn put(&self, key: &str, text: String) -> Result<()> {
        if let Some(p) = self.path_of(key) {
            // write-then-rename so an interrupted run never leaves a torn artifact
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, &text)?;
            std::fs::rename(&tmp, &p)?;
        }
        self.mem.lock().expect("store lock").insert(key.to_string(), text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mem.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
