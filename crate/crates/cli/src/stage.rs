//! Restartable stages. Each stage records a stamp of its resolved inputs next
//! to its outputs; rerunning with the same stamp and all outputs present is a
//! no-op unless forced.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::Value;

pub struct Stage {
    name: &'static str,
    stamp_path: PathBuf,
    stamp: Value,
    outputs: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum Plan {
    /// Outputs are current.
    Skip,
    Run,
}

/// Stable fingerprint of a file's bytes, so stamps change when inputs do.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| drivefusion::Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    // FNV-1a: fixed, dependency-free and stable across toolchains
    let mut h = Fnv(0xcbf2_9ce4_8422_2325);
    h.write(&bytes);
    Ok(format!("{:016x}-{}", h.finish(), bytes.len()))
}

struct Fnv(u64);

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

impl Stage {
    pub fn new(name: &'static str, dir: &Path, stamp: Value, outputs: Vec<PathBuf>) -> Self {
        Self {
            name,
            stamp_path: dir.join(format!(".{name}.stamp.json")),
            stamp,
            outputs,
        }
    }

    /// Skip when every output exists and the stored stamp matches. Refuses to
    /// replace outputs produced from different inputs unless `force`.
    pub fn plan(&self, force: bool) -> Result<Plan> {
        if force {
            return Ok(Plan::Run);
        }
        let present: Vec<&PathBuf> = self.outputs.iter().filter(|p| p.exists()).collect();
        if present.is_empty() {
            return Ok(Plan::Run);
        }
        let stored: Option<Value> = std::fs::read_to_string(&self.stamp_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        if stored.as_ref() == Some(&self.stamp) && present.len() == self.outputs.len() {
            log::info!(
                "{}: outputs are up to date, nothing to do (pass --force to rerun)",
                self.name
            );
            return Ok(Plan::Skip);
        }
        Err(drivefusion::Error::AlreadyExists(present[0].clone()).into())
    }

    pub fn finish(&self) -> Result<()> {
        if let Some(dir) = self.stamp_path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(&self.stamp)?;
        std::fs::write(&self.stamp_path, text)
            .with_context(|| format!("writing {}", self.stamp_path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stamps_gate_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.txt");
        let stage = Stage::new("demo", dir.path(), json!({"a": 1}), vec![out.clone()]);
        assert!(matches!(stage.plan(false).unwrap(), Plan::Run));
        std::fs::write(&out, "x").unwrap();
        // output without a stamp is not ours to replace
        assert!(stage.plan(false).is_err());
        stage.finish().unwrap();
        assert!(matches!(stage.plan(false).unwrap(), Plan::Skip));
        let changed = Stage::new("demo", dir.path(), json!({"a": 2}), vec![out.clone()]);
        let err = changed.plan(false).unwrap_err();
        assert!(matches!(
            err.downcast_ref(),
            Some(drivefusion::Error::AlreadyExists(_))
        ));
        assert!(matches!(changed.plan(true).unwrap(), Plan::Run));
    }

    #[test]
    fn digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("f");
        std::fs::write(&f, "abc").unwrap();
        let a = file_digest(&f).unwrap();
        assert_eq!(a, "e71fa2190541574b-3");
        std::fs::write(&f, "abd").unwrap();
        assert_ne!(file_digest(&f).unwrap(), a);
        assert!(file_digest(&dir.path().join("missing")).is_err());
    }
}
