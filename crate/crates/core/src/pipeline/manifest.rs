//! Run manifest: the machine-readable receipt a pipeline run leaves behind.
//!
//! Every artifact the run produced is listed with its content hash, so two
//! runs can be compared by diffing manifests alone, and a rerun over an
//! existing output directory can be audited for bitwise reproducibility.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One produced file or model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    /// Path relative to the run's output directory.
    pub path: String,
    /// Artifact class: `model`, `adapter`, `dataset`, or `report`.
    pub kind: String,
    /// Content hash of the artifact (checkpoint canonical bytes or raw file
    /// bytes, depending on kind).
    pub content_hash: String,
    /// Seconds spent producing the artifact. Zero when it was loaded from a
    /// previous run instead of recomputed.
    pub wall_time_s: f64,
    /// Parameters updated while producing this artifact, when it came out of
    /// an optimizer. Lets reports compare arm footprints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_params: Option<usize>,
}

/// Summary of one full pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: String,
    /// Canonical TOML echo of the resolved configuration.
    pub config_echo: String,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    /// Stage names in execution order, completed stages only.
    pub stages_run: Vec<String>,
    /// Total wall time of the run in seconds.
    pub wall_time_s: f64,
    /// False when a stage failed; `failed_stage` then names it.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    /// Outcome of the cross-family transfer check: the homology error text
    /// when the transfer was refused as expected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_family: Option<String>,
}

impl RunManifest {
    pub fn new(config_echo: String) -> RunManifest {
        RunManifest {
            format_version: crate::FORMAT_VERSION.to_string(),
            config_echo,
            artifacts: BTreeMap::new(),
            stages_run: Vec::new(),
            wall_time_s: 0.0,
            complete: false,
            failed_stage: None,
            cross_family: None,
        }
    }

    pub fn record(&mut self, name: impl Into<String>, record: ArtifactRecord) {
        self.artifacts.insert(name.into(), record);
    }

    /// Artifact name to content hash, the part of the manifest that must be
    /// identical between runs with the same config.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|(k, v)| (k.clone(), v.content_hash.clone()))
            .collect()
    }

    pub fn trained_params(&self, name: &str) -> Option<usize> {
        self.artifacts.get(name).and_then(|a| a.trained_params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("manifest", format!("serialize: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format("manifest", format!("parse {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunManifest {
        let mut m = RunManifest::new("seed = 1".to_string());
        m.record(
            "model/base",
            ArtifactRecord {
                path: "models/base.ckpt".into(),
                kind: "model".into(),
                content_hash: "abc123".into(),
                wall_time_s: 1.5,
                trained_params: Some(4096),
            },
        );
        m.record(
            "report/effectiveness",
            ArtifactRecord {
                path: "reports/effectiveness.csv".into(),
                kind: "report".into(),
                content_hash: "def456".into(),
                wall_time_s: 0.0,
                trained_params: None,
            },
        );
        m.stages_run.push("pretrain:aurora".into());
        m.complete = true;
        m
    }

    #[test]
    fn roundtrips_through_json_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = sample();
        m.write(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.hashes(), m.hashes());
        assert_eq!(back.stages_run, m.stages_run);
        assert!(back.complete);
        assert_eq!(back.trained_params("model/base"), Some(4096));
        assert_eq!(back.trained_params("report/effectiveness"), None);
    }

    #[test]
    fn hashes_ignore_wall_times() {
        let mut a = sample();
        let mut b = sample();
        a.wall_time_s = 10.0;
        b.wall_time_s = 20.0;
        a.artifacts.get_mut("model/base").unwrap().wall_time_s = 9.0;
        assert_eq!(a.hashes(), b.hashes());
    }

    #[test]
    fn format_version_is_stamped() {
        assert_eq!(sample().format_version, crate::FORMAT_VERSION);
    }

    #[test]
    fn malformed_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, "not json").unwrap();
        let err = RunManifest::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
