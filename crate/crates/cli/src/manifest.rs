use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lenrank_core::training::CHECKPOINT_VERSION;
use lenrank_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// Record of one run: the resolved configuration, inputs, outputs and versions.
/// Contains no timestamps so reruns produce the same file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("lenrank".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string());
        Manifest {
            command: command.to_string(),
            seed: config.train.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            versions,
            config: config.clone(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `model.json` → `model.manifest.json`, beside the output.
pub fn manifest_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(
            manifest_path(Path::new("out/model.json")),
            Path::new("out/model.manifest.json")
        );
        assert_eq!(manifest_path(Path::new("report")), Path::new("report.manifest.json"));
    }

    #[test]
    fn round_trips() {
        let mut m = Manifest::new("train", &RunConfig::default());
        m.input("train", Path::new("a.csv")).output(Path::new("b.json"));
        let text = serde_json::to_string(&m).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
