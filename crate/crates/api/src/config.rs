//! Service configuration, read from a TOML file and overridden by flags and
//! environment variables.

use std::fs;
use std::path::{Path, PathBuf};

use coursebot_core::rate_limit::LimiterConfig;
use serde::Deserialize;
use thiserror::Error;

pub const TOKEN_ENV: &str = "COURSEBOT_API_TOKEN";
pub const DATA_DIR_ENV: &str = "COURSEBOT_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn default_port() -> u16 {
    8080
}

fn default_tick_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub course_data: PathBuf,
    /// Fire triggers whose time passed before the service started.
    #[serde(default)]
    pub catch_up: bool,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default)]
    pub limiter: LimiterConfig,
}

/// Values given on the command line or in the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub port: Option<u16>,
    pub data_dir: Option<PathBuf>,
    pub env_data_dir: Option<PathBuf>,
    pub env_token: Option<String>,
}

impl Overrides {
    pub fn from_env(port: Option<u16>, data_dir: Option<PathBuf>) -> Self {
        Self {
            port,
            data_dir,
            env_data_dir: std::env::var_os(DATA_DIR_ENV).map(PathBuf::from),
            env_token: std::env::var(TOKEN_ENV).ok(),
        }
    }
}

impl ApiConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load `path`, resolve relative paths against its directory and apply overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.course_data = base.join(&config.course_data);
        config.data_dir = config.data_dir.map(|d| base.join(d));
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    /// Flags win over the environment, which wins over the file.
    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(port) = overrides.port {
            self.port = port;
        }
        if let Some(dir) = overrides.data_dir.clone().or_else(|| overrides.env_data_dir.clone()) {
            self.data_dir = Some(dir);
        }
        if let Some(token) = overrides.env_token.clone() {
            self.auth_token = Some(token);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.port == 0 {
            return Err(ConfigError::Invalid("port must be in 1..=65535".into()));
        }
        if self.auth_token.as_deref().is_none_or(|t| t.trim().is_empty()) {
            return Err(ConfigError::Invalid(format!(
                "auth_token must be set in the config file or via {TOKEN_ENV}"
            )));
        }
        if self.data_dir.is_none() {
            return Err(ConfigError::Invalid(format!(
                "data_dir must be set in the config file, via --data-dir or via {DATA_DIR_ENV}"
            )));
        }
        if self.tick_ms == 0 {
            return Err(ConfigError::Invalid("tick_ms must be positive".into()));
        }
        self.limiter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn token(&self) -> &str {
        self.auth_token.as_deref().unwrap_or_default()
    }

    pub fn data_dir(&self) -> &Path {
        self.data_dir.as_deref().unwrap_or(Path::new("data"))
    }
}
