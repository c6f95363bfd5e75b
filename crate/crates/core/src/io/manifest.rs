//! Dataset manifest: a JSON list of clip entries with labels and seeds.
//!
//! Paths are stored relative to the manifest's directory. Unknown keys are
//! rejected so schema drift fails loudly instead of being ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};

/// One dataset sample: clip file, optional embedding file, label, seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<String>,
    pub label: u8,
    pub seed: u64,
}

impl ManifestEntry {
    /// Clip path resolved against the manifest directory.
    pub fn clip_path(&self, base: &Path) -> PathBuf {
        base.join(&self.clip)
    }

    /// Embedding path resolved against the manifest directory, if present.
    pub fn embedding_path(&self, base: &Path) -> Option<PathBuf> {
        self.embedding.as_ref().map(|e| base.join(e))
    }
}

/// Write the manifest as pretty-printed JSON with a trailing newline.
pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Load and validate a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| SgError::data(&name, e.to_string()))?;
    for entry in &entries {
        if entry.label > 1 {
            return Err(SgError::data(
                &name,
                format!("label {} for {} is not 0 or 1", entry.label, entry.clip),
            ));
        }
        if entry.clip.is_empty() {
            return Err(SgError::data(&name, "empty clip path"));
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ManifestEntry> {
        vec![
            ManifestEntry {
                clip: "clip_000.ct01".into(),
                embedding: Some("emb_000.ct01".into()),
                label: 0,
                seed: 7,
            },
            ManifestEntry {
                clip: "clip_001.ct01".into(),
                embedding: None,
                label: 1,
                seed: 8,
            },
        ]
    }

    #[test]
    fn test_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let entries = sample();
        save_manifest(&path, &entries).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn test_unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"[{"clip":"a.ct01","label":0,"seed":1,"codec":"h264"}]"#,
        )
        .unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn test_bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"[{"clip":"a.ct01","label":2,"seed":1}]"#).unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn test_missing_embedding_is_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"[{"clip":"a.ct01","label":1,"seed":3}]"#).unwrap();
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries[0].embedding, None);
        assert_eq!(entries[0].clip_path(Path::new("/d")), PathBuf::from("/d/a.ct01"));
    }

    #[test]
    fn test_save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_manifest(&a, &sample()).unwrap();
        save_manifest(&b, &sample()).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
