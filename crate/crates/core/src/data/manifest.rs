//! Dataset manifests: a TOML document listing image/mask pairs.
//!
//! ```toml
//! encoding = "orca3"        # or "binary"
//! patch_size = [512, 512]
//!
//! [[entries]]
//! image_path = "images/0001.png"
//! mask_path = "masks/0001.png"
//! split = "train"           # train | val | test
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::MaskEncoding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub encoding: MaskEncoding,
    pub patch_size: [usize; 2],
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl SampleManifest {
    pub fn new(encoding: MaskEncoding, patch_size: [usize; 2], root: impl Into<PathBuf>) -> Self {
        Self {
            encoding,
            patch_size,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Checks patch geometry, split disjointness and that every file exists.
    pub fn validate(&self, origin: &Path) -> Result<()> {
        let [ph, pw] = self.patch_size;
        if ph == 0 || pw == 0 {
            return Err(Error::data(origin, "patch_size must be positive"));
        }
        if self.entries.is_empty() {
            return Err(Error::data(origin, "manifest lists no entries"));
        }
        let mut seen: HashMap<PathBuf, Split> = HashMap::new();
        for e in &self.entries {
            for p in [&e.image_path, &e.mask_path] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::data(full, "referenced file does not exist"));
                }
            }
            let key = self.resolve(&e.image_path);
            match seen.get(&key) {
                Some(&s) if s != e.split => {
                    return Err(Error::data(
                        key,
                        format!("image listed in both {s:?} and {:?} splits", e.split),
                    ))
                }
                _ => {
                    seen.insert(key, e.split);
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a manifest.
pub fn load_manifest(path: &Path) -> Result<SampleManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: SampleManifest =
        toml::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    manifest.validate(path)?;
    Ok(manifest)
}
