use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats::{file_sha256, read_text, write_file};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to the outputs of every artifact-producing command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: PipelineConfig,
    /// Command options outside the config file, such as `k` or `sparse_n`.
    pub options: BTreeMap<String, String>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &PipelineConfig) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config: config.clone(),
            options: BTreeMap::new(),
            inputs: BTreeMap::new(),
            seed: None,
            code_version: env!("CARGO_PKG_VERSION").into(),
            outputs: Vec::new(),
        }
    }

    pub fn option(&mut self, key: &str, value: impl ToString) {
        self.options.insert(key.into(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(MANIFEST_FILE), self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "abc").unwrap();
        let mut m = RunManifest::new("embed", &PipelineConfig::default());
        m.input(&input).unwrap();
        m.option("sparse_n", 8);
        m.seed = Some(4);
        m.output(Path::new("out/index.bin"));
        m.save(dir.path()).unwrap();
        let back = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.inputs.values().next().unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(m.input(&dir.path().join("missing")).is_err());
    }
}
