use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::binio::{file_digest, read_file, sha256_hex, write_file};
use crate::codec::CODEC_VERSION;
use crate::error::{Error, Result};
use crate::model::CHECKPOINT_VERSION;
use crate::tokens::STREAM_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record written next to every stage's outputs. `key` digests everything
/// the stage was computed from, so a stage is reused only when its inputs
/// are unchanged and every listed artifact still matches its digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub name: String,
    pub key: String,
    pub config_digest: String,
    pub seed: Option<u64>,
    /// Echo of the inputs the key was computed from.
    pub config: Value,
    /// Path relative to the stage directory → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("speechlm".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("codec_format".to_string(), CODEC_VERSION.to_string()),
        ("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string()),
        ("stream_format".to_string(), STREAM_VERSION.to_string()),
    ])
}

/// Digest of a directory tree: relative paths and contents, in sorted order.
pub fn dir_digest(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let path = e.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("under base").to_string_lossy().into_owned();
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for (rel, path) in &files {
        listing.push_str(&format!("{} {}\n", file_digest(path)?, rel));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn artifact_digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        dir_digest(path)
    } else if path.exists() {
        file_digest(path)
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: "listed in the manifest but absent".into(),
        })
    }
}

impl Manifest {
    pub fn new(stage: &str, name: &str, key: String, config_digest: String, seed: Option<u64>, config: Value) -> Self {
        Manifest {
            stage: stage.into(),
            name: name.into(),
            key,
            config_digest,
            seed,
            config,
            artifacts: BTreeMap::new(),
            versions: versions(),
        }
    }

    /// Records the digest of `rel` (a file or directory under `dir`).
    pub fn add(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let d = artifact_digest(&dir.join(rel))?;
        self.artifacts.insert(rel.to_string(), d);
        Ok(())
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&Self::path(dir), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = Self::path(dir);
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn load_if_present(dir: &Path) -> Result<Option<Manifest>> {
        if Self::path(dir).exists() {
            Self::load(dir).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Digest of the manifest file itself, used to chain stages.
    pub fn digest(dir: &Path) -> Result<String> {
        file_digest(&Self::path(dir))
    }

    /// Checks every artifact against its recorded digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (rel, expected) in &self.artifacts {
            let path = dir.join(rel);
            let actual = artifact_digest(&path)?;
            if &actual != expected {
                return Err(Error::Digest {
                    path,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Every directory below `root` holding a manifest, sorted.
pub fn find_manifests(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if Manifest::path(&dir).exists() {
            out.push(dir.clone());
        }
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in entries {
            let path = e.map_err(|e| Error::io(&dir, e))?.path();
            // frame stores are large and never hold manifests
            if path.is_dir() && path.file_name().is_some_and(|n| n != "frames") {
                stack.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), b"abc").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/x"), b"1").unwrap();
        let mut m = Manifest::new("s", "n", "k".into(), "c".into(), Some(1), Value::Null);
        m.add(dir.path(), "a.bin").unwrap();
        m.add(dir.path(), "sub").unwrap();
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        fs::write(dir.path().join("sub/x"), b"2").unwrap();
        assert!(matches!(back.verify(dir.path()), Err(Error::Digest { .. })));
        fs::remove_file(dir.path().join("a.bin")).unwrap();
        assert!(matches!(back.verify(dir.path()), Err(Error::MissingArtifact { .. })));
    }

    #[test]
    fn dir_digest_ignores_creation_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::write(a.path().join("1"), b"x").unwrap();
        fs::write(a.path().join("2"), b"y").unwrap();
        fs::write(b.path().join("2"), b"y").unwrap();
        fs::write(b.path().join("1"), b"x").unwrap();
        assert_eq!(dir_digest(a.path()).unwrap(), dir_digest(b.path()).unwrap());
    }
}
