//! Versioned JSON checkpoints.
//!
//! Layout (one JSON object, UTF-8):
//!
//! ```text
//! {
//!   "format": "kdfusion.checkpoint",
//!   "version": 1,
//!   "kind": "teacher" | "student" | "fusion" | ...,
//!   "seed": <u64>,
//!   "config_hash": "<hex sha-256 of the run config>",
//!   "model": { ... }
//! }
//! ```
//!
//! Inside `model`, every matrix is `{"rows": r, "cols": c, "data": [...]}`
//! with `data` in row-major order and every bias a plain array. Floats are
//! written in shortest round-trip form, so a load reproduces the saved
//! weights bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "kdfusion.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub model: T,
}

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn new(
        kind: impl Into<String>,
        seed: u64,
        config_hash: impl Into<String>,
        model: T,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            seed,
            config_hash: config_hash.into(),
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; a missing file is a dependency error naming the path.
    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency {
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema {
                line: 1,
                message: format!(
                    "{}: unsupported checkpoint {} v{}",
                    path.display(),
                    ckpt.format,
                    ckpt.version
                ),
            });
        }
        if ckpt.kind != expected_kind {
            return Err(Error::Schema {
                line: 1,
                message: format!(
                    "{}: expected a {expected_kind} checkpoint, found {}",
                    path.display(),
                    ckpt.kind
                ),
            });
        }
        Ok(ckpt)
    }
}
