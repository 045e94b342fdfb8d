//! Run manifests: enough to re-run a command and check its outputs.

use std::path::Path;

use anyhow::Context;
use ltag_core::config::RunConfig;
use ltag_core::model::Model;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: String,
    pub args: Vec<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(argv: &[String]) -> Self {
        Self {
            version: format!("v{}", ltag_core::VERSION),
            args: argv.iter().skip(1).cloned().collect(),
            config_sha256: None,
            seed: None,
        }
    }

    pub fn set_config(&mut self, cfg: &RunConfig) {
        self.config_sha256 = Some(sha256_hex(cfg.render().as_bytes()));
        self.seed = Some(cfg.model.seed);
    }

    pub fn set_model(&mut self, model: &Model) {
        let json = serde_json::to_string(model.config()).expect("config serialises");
        self.config_sha256 = Some(sha256_hex(json.as_bytes()));
        self.seed = Some(model.config().seed);
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    /// `<output>.manifest.json` next to a file output.
    pub fn write_beside(&self, output: &Path) -> anyhow::Result<()> {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        self.write(&output.with_file_name(name))
    }

    /// `manifest.json` inside an output directory.
    pub fn write_in(&self, dir: &Path) -> anyhow::Result<()> {
        self.write(&dir.join("manifest.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_reference() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lands_next_to_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pred.jsonl");
        Manifest::new(&["ltag".into(), "x".into()]).write_beside(&out).unwrap();
        let text = std::fs::read_to_string(dir.path().join("pred.jsonl.manifest.json")).unwrap();
        assert!(text.contains("\"args\""));
    }
}
