//! Optional JSON configuration file. Flags override file values, file
//! values override defaults; unknown keys are rejected.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub k_max: Option<usize>,
    pub trim: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub rho: Option<f64>,
    pub big_m: Option<f64>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub burn_in: Option<usize>,
    pub fix_eps: Option<f64>,
    pub ic_count_threshold: Option<u8>,
    pub time_limit: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }
}

/// Flag value, then config file, then default.
pub fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_opt<T: Copy>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}
