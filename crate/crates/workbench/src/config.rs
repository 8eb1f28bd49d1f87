//! Workbench configuration.
//!
//! Values are resolved in this order, later sources winning:
//! built-in defaults, the TOML config file, environment variables,
//! command-line flags.
//!
//! | variable            | key                  |
//! |---------------------|----------------------|
//! | `FEATSEG_CONFIG`    | config file path     |
//! | `FEATSEG_PORT`      | `server.port`        |
//! | `FEATSEG_STORE`     | `store.root`         |
//! | `FEATSEG_EXTRACTOR` | `extractor.command`  |
//! | `FEATSEG_WEIGHTS`   | `extractor.weights`  |

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use featseg_core::{FeatureSetConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Concurrent long-running jobs (training, extraction).
    pub workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7878,
            workers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub root: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("featseg-store"),
        }
    }
}

/// Sidecar deep-feature extractor.
///
/// The command is run as `command... <input.png> <output.fts>` and must
/// write an FTS1 file: either a patch grid (upsampled here with `weights`)
/// or a full-resolution stack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub command: Vec<String>,
    /// Recorded in the deep cache key; defaults to the joined command.
    pub id: Option<String>,
    /// Upsampler weight archive (WAR1).
    pub weights: Option<PathBuf>,
    /// Channels kept after shared PCA; defaults to the weights' input width.
    pub k: Option<usize>,
}

impl ExtractorConfig {
    pub fn extractor_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.command.join(" "))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerConfig,
    pub store: StoreConfig,
    pub extractor: ExtractorConfig,
    pub features: FeatureSetConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults, then `file` (or `FEATSEG_CONFIG`), then environment.
    pub fn resolve(file: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let file = file.map(Path::to_path_buf).or_else(|| env("FEATSEG_CONFIG").map(PathBuf::from));
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        cfg.features.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<()> {
        if let Some(p) = env("FEATSEG_PORT") {
            self.server.port = p.trim().parse().with_context(|| format!("FEATSEG_PORT={p:?} is not a port"))?;
        }
        if let Some(s) = env("FEATSEG_STORE") {
            self.store.root = PathBuf::from(s);
        }
        if let Some(c) = env("FEATSEG_EXTRACTOR") {
            let parts: Vec<String> = c.split_whitespace().map(str::to_string).collect();
            if parts.is_empty() {
                bail!("FEATSEG_EXTRACTOR is empty");
            }
            self.extractor.command = parts;
        }
        if let Some(w) = env("FEATSEG_WEIGHTS") {
            self.extractor.weights = Some(PathBuf::from(w));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let m: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| m.get(k).cloned()
    }

    #[test]
    fn env_beats_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wb.toml");
        std::fs::write(
            &path,
            "[server]\nport = 9000\nworkers = 3\n[store]\nroot = \"/tmp/s\"\n[train]\nseed = 5\n[train.gbt]\nn_rounds = 7\n",
        )
        .unwrap();
        let cfg = Config::resolve(Some(&path), env_of(&[])).unwrap();
        assert_eq!(cfg.server.port, 9000);
        assert_eq!(cfg.server.workers, 3);
        assert_eq!(cfg.server.host, "127.0.0.1");
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.gbt.n_rounds, 7);
        assert_eq!(cfg.train.gbt.max_depth, 6);

        let cfg = Config::resolve(Some(&path), env_of(&[("FEATSEG_PORT", "9100"), ("FEATSEG_EXTRACTOR", "python x.py")])).unwrap();
        assert_eq!(cfg.server.port, 9100);
        assert_eq!(cfg.store.root, PathBuf::from("/tmp/s"));
        assert_eq!(cfg.extractor.command, vec!["python", "x.py"]);
        assert_eq!(cfg.extractor.extractor_id(), "python x.py");
    }

    #[test]
    fn bad_values_are_errors() {
        assert!(Config::resolve(None, env_of(&[("FEATSEG_PORT", "http")])).is_err());
        assert!(Config::from_toml("[server]\nprot = 1\n").is_err());
        assert_eq!(Config::resolve(None, env_of(&[])).unwrap(), Config::default());
    }
}
