//! Optional TOML run configuration. Command-line flags take precedence over
//! the file, and the file over built-in defaults.

use std::path::{Path, PathBuf};

use deepcl::train::Reduction;
use deepcl::{Error, ModelKind, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub mirror: Option<String>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub rate: Option<f64>,
    pub rates: Option<Vec<f64>>,
    pub kind: Option<ModelKind>,
    pub kinds: Option<Vec<ModelKind>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub reduction: Option<Reduction>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }
}

/// First present value: flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
