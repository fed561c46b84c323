use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServeError;

pub const MODEL_DIR_ENV: &str = "PREFX_MODEL_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub model_dir: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub default_k: usize,
    pub default_beam: usize,
    /// Requests may not ask for more than this many suggestions.
    pub max_k: usize,
    pub max_beam: usize,
    /// In bytes, after normalization.
    pub max_prefix_len: usize,
    pub mfq_fallback: bool,
    /// Static files mounted under `/demo`.
    pub demo_dir: PathBuf,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            model_dir: None,
            host: "127.0.0.1".into(),
            port: 8080,
            default_k: 10,
            default_beam: 10,
            max_k: 100,
            max_beam: 1000,
            max_prefix_len: 256,
            mfq_fallback: true,
            demo_dir: PathBuf::from("webdemo/dist"),
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub model_dir: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub default_k: Option<usize>,
    pub default_beam: Option<usize>,
    pub max_prefix_len: Option<usize>,
    pub mfq_fallback: Option<bool>,
    pub demo_dir: Option<PathBuf>,
}

impl ServeConfig {
    pub fn from_file(path: &Path) -> Result<Self, ServeError> {
        let text = fs::read_to_string(path).map_err(|e| ServeError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ServeError::Config(format!("{}: {e}", path.display())))
    }

    /// Layers, lowest first: defaults, config file, `PREFX_MODEL_DIR`,
    /// command-line flags.
    pub fn resolve(file: Option<&Path>, env_model_dir: Option<String>, o: Overrides) -> Result<Self, ServeError> {
        let mut c = match file {
            Some(p) => Self::from_file(p)?,
            None => ServeConfig::default(),
        };
        if let Some(d) = env_model_dir.filter(|d| !d.is_empty()) {
            c.model_dir = Some(d.into());
        }
        if let Some(v) = o.model_dir {
            c.model_dir = Some(v);
        }
        if let Some(v) = o.host {
            c.host = v;
        }
        if let Some(v) = o.port {
            c.port = v;
        }
        if let Some(v) = o.default_k {
            c.default_k = v;
        }
        if let Some(v) = o.default_beam {
            c.default_beam = v;
        }
        if let Some(v) = o.max_prefix_len {
            c.max_prefix_len = v;
        }
        if let Some(v) = o.mfq_fallback {
            c.mfq_fallback = v;
        }
        if let Some(v) = o.demo_dir {
            c.demo_dir = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ServeError> {
        let bad = |m: &str| Err(ServeError::Config(m.to_string()));
        if self.default_k == 0 || self.default_k > self.max_k {
            return bad("default_k must be between 1 and max_k");
        }
        if self.default_beam == 0 || self.default_beam > self.max_beam {
            return bad("default_beam must be between 1 and max_beam");
        }
        if self.max_prefix_len == 0 {
            return bad("max_prefix_len must be at least 1");
        }
        Ok(())
    }

    pub fn model_dir(&self) -> Result<&Path, ServeError> {
        self.model_dir
            .as_deref()
            .ok_or_else(|| ServeError::Config(format!("no model directory: pass --model or set {MODEL_DIR_ENV}")))
    }

    pub fn addr(&self) -> Result<SocketAddr, ServeError> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|e| ServeError::Config(format!("bad listen address {}:{}: {e}", self.host, self.port)))
    }
}
