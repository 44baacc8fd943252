//! Run manifests: every artifact directory carries exactly one
//! `manifest.json` tying the outputs to the exact config (by content hash),
//! seed and tool version that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_path: String,
    /// `sha256:<hex>` of the raw config file bytes.
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    /// Wall-clock fields; reruns are byte-identical except for these.
    pub duration_seconds: f64,
    pub created_unix: u64,
}

pub fn config_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("sha256:{:x}", hasher.finalize())
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, manifest)?;
    use std::io::Write;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let f = std::io::BufReader::new(std::fs::File::open(dir.join("manifest.json"))?);
    Ok(serde_json::from_reader(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let d1 = config_digest(b"seed = 7");
        let d2 = config_digest(b"seed = 7");
        let d3 = config_digest(b"seed = 8");
        assert_eq!(d1, d2);
        assert_ne!(d1, d3);
        assert!(d1.starts_with("sha256:"));
        assert_eq!(d1.len(), "sha256:".len() + 64);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: "simulate".into(),
            config_path: "configs/sim.toml".into(),
            config_digest: config_digest(b"x"),
            seed: Some(7),
            inputs: vec![],
            outputs: vec!["train.csv".into()],
            tool_version: "0.1.0".into(),
            duration_seconds: 1.5,
            created_unix: 1700000000,
        };
        write_manifest(dir.path(), &m).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.command, "simulate");
        assert_eq!(back.config_digest, m.config_digest);
        assert_eq!(back.seed, Some(7));
    }
}
