use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the service config file.
pub const CONFIG_ENV: &str = "GLYTWIN_CONFIG";

/// Startup settings, read from TOML.
///
/// ```toml
/// bind = "127.0.0.1:8080"
/// model_path = "glytwin-out/models/classifier.json"
/// dataset_path = "glytwin-out/dataset/samples.csv"
/// cors_origins = ["http://localhost:5173"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub model_path: PathBuf,
    pub dataset_path: PathBuf,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    /// Used when a request leaves `gamma` out.
    pub gamma: f64,
    /// Used when a request leaves `max_iter` out.
    pub max_iter: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            model_path: PathBuf::from("glytwin-out/models/classifier.json"),
            dataset_path: PathBuf::from("glytwin-out/dataset/samples.csv"),
            cors_origins: Vec::new(),
            gamma: 0.6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads the file named by `GLYTWIN_CONFIG`, or the defaults when it is
    /// unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(path) => Self::load(Path::new(&path)),
            None => Ok(Self::default()),
        }
    }
}
