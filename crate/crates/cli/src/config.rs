use std::fs;
use std::path::{Path, PathBuf};

use lenrank_core::data::{PreprocessConfig, SplitSpec};
use lenrank_core::evaluation::EvalConfig;
use lenrank_core::grouping::GroupScheme;
use lenrank_core::synthgen::SynthConfig;
use lenrank_core::training::TrainConfig;
use lenrank_core::Error;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs, read from one TOML document. Every section and
/// key is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub evaluation: EvalConfig,
    pub synth: SynthConfig,
    pub grid: GridConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: Option<PathBuf>,
    pub videos: Option<PathBuf>,
    pub category_file: Option<PathBuf>,
    /// Group preset name, ignored when `boundaries` is set.
    pub groups: String,
    /// Custom upper edges of the length groups.
    pub boundaries: Option<Vec<f64>>,
    pub preprocess: PreprocessConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: None,
            videos: None,
            category_file: None,
            groups: "kuaishou".into(),
            boundaries: None,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn scheme(&self) -> Result<GroupScheme, CliError> {
        match &self.boundaries {
            Some(b) => GroupScheme::new(b.clone()).map_err(|e| match e {
                Error::InvalidConfig { message, .. } => Error::config("data.boundaries", message),
                e => e,
            }),
            None => GroupScheme::preset(&self.groups).ok_or_else(|| {
                Error::config(
                    "data.groups",
                    format!("unknown preset `{}` (expected kuaishou or wechat)", self.groups),
                )
            }),
        }
        .map_err(CliError::from)
    }
}

/// Hyperparameter axes searched by `grid`. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let usage = |e: String| CliError::Usage(format!("{}: {}", p.display(), e.trim_end()));
                let raw: toml::Table = toml::from_str(&text).map_err(|e: toml::de::Error| usage(e.to_string()))?;
                let cfg: RunConfig = toml::from_str(&text).map_err(|e: toml::de::Error| usage(e.to_string()))?;
                let known = toml::Table::try_from(&cfg).map_err(|e| usage(e.to_string()))?;
                if let Some(key) = unknown_key(&raw, &known, "") {
                    return Err(usage(format!("unknown field `{key}`")));
                }
                cfg
            }
        };
        Ok(cfg)
    }

    /// Checks every section, naming the offending key on failure.
    pub fn validate(&self) -> Result<(), CliError> {
        self.data.scheme()?;
        let p = &self.data.preprocess;
        if !(p.max_progress > 0.0) {
            return Err(Error::config("data.preprocess.max_progress", "must be positive").into());
        }
        if !(p.max_length > 0.0) {
            return Err(Error::config("data.preprocess.max_length", "must be positive").into());
        }
        self.split.validate().map_err(|e| prefix("split", e))?;
        self.train.validate().map_err(|e| prefix("train", e))?;
        self.evaluation.validate()?;
        self.synth.validate()?;
        for (name, values) in [
            ("grid.learning_rate", &self.grid.learning_rate),
            ("grid.dropout", &self.grid.dropout),
            ("grid.alpha", &self.grid.alpha),
            ("grid.beta", &self.grid.beta),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(name, "values must be finite").into());
            }
        }
        Ok(())
    }

    /// Applies a seed override to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }
}

/// First key of `raw` with no counterpart in the re-serialized configuration.
/// Catches typos inside nested sections that serde would otherwise ignore.
fn unknown_key(raw: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in raw {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(r), Some(toml::Value::Table(n))) => {
                if let Some(found) = unknown_key(r, n, &format!("{path}.")) {
                    return Some(found);
                }
            }
            _ => {}
        }
    }
    None
}

/// Qualifies a configuration error's field with its section name when the
/// core reported it relative to the section.
fn prefix(section: &str, e: Error) -> CliError {
    match e {
        Error::InvalidConfig { field, message } if !field.starts_with(&format!("{section}.")) => {
            Error::config(format!("{section}.{field}"), message).into()
        }
        e => e.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn load_rejects_misspelled_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let good = "[data]\ngroups = \"wechat\"\ncategory_file = \"c.csv\"\n\
                    [train]\nalpha = 0.3\n[train.method]\nkind = \"ips_c\"\nips_cap = 0.2\n\
                    [train.model]\nembedding_dim = 4\nhidden_sizes = [8]\ndropout_rate = 0.1\n\
                    [train.labeling]\nbeta = 0.7\n[grid]\nalpha = [0.1]\n";
        fs::write(&path, good).unwrap();
        RunConfig::load(Some(&path)).unwrap();
        fs::write(&path, "[train.model]\nhiden_sizes = [8]\n").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err().to_string();
        assert!(err.contains("train.model.hiden_sizes"), "{err}");
    }

    #[test]
    fn nested_sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [data]
            groups = "wechat"
            [train]
            alpha = 0.3
            max_epochs = 2
            [train.method]
            kind = "ips_c"
            ips_cap = 0.2
            [train.model]
            embedding_dim = 4
            hidden_sizes = [8]
            [train.labeling]
            beta = 0.7
            [evaluation]
            t = [60.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.scheme().unwrap(), GroupScheme::wechat());
        assert_eq!(cfg.train.alpha, 0.3);
        assert_eq!(cfg.train.model.head.hidden_sizes, vec![8]);
        assert_eq!(cfg.train.labeling.beta, 0.7);
        assert_eq!(cfg.train.method.ips_cap, Some(0.2));
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_values_name_the_field() {
        let cfg: RunConfig = toml::from_str("[train]\nalpha = 2.0\n").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("train.alpha"), "{msg}");

        let cfg: RunConfig = toml::from_str("[train.labeling]\nbeta = -1.0\n").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("beta"), "{msg}");

        let cfg: RunConfig = toml::from_str("[data]\ngroups = \"tiktok\"\n").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("data.groups"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[data]\nvideo = \"x\"\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
    }
}
