use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use promptpool::{Continuity, PoolMode};
use serde::Deserialize;

/// A scalar or a list in the config file, e.g. `"kernel": [2, 3, 3]` or
/// `"kernel": [[1, 6, 6], [8, 2, 2]]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    pub fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Values read from `--config`. Every key is optional and shared by all
/// commands; command-line flags and `PROMPTPOOL_*` variables take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub projection: Option<PathBuf>,
    pub text: Option<OneOrMany<PathBuf>>,
    pub output: Option<PathBuf>,

    pub kernel: Option<OneOrMany<[usize; 3]>>,
    pub stride: Option<OneOrMany<[usize; 3]>>,
    pub mode: Option<PoolMode>,
    pub separate_st: Option<bool>,

    pub temperature: Option<f64>,
    pub normalize: Option<bool>,

    pub threshold: Option<f64>,
    pub top_k: Option<usize>,

    pub boundary: Option<usize>,
    pub r_head: Option<f64>,
    pub r_tail: Option<f64>,
    pub target_length: Option<usize>,
    pub continuity: Option<Continuity>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub scale: Option<f64>,

    pub parallelism: Option<OneOrMany<usize>>,
    pub reps: Option<usize>,
    pub shape: Option<[usize; 4]>,
    pub scaling: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag value if given, else the config value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Non-empty flag list if given, else the config list.
pub fn pick_list<T>(flag: Vec<T>, file: Option<OneOrMany<T>>) -> Vec<T> {
    if flag.is_empty() {
        file.map(OneOrMany::into_vec).unwrap_or_default()
    } else {
        flag
    }
}

/// Parses `a,b,c` into three positive integers.
pub fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected three comma-separated integers, got '{s}'"
        ));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .parse()
            .map_err(|_| format!("'{p}' is not a non-negative integer"))?;
    }
    Ok(out)
}

/// Parses `t,w,h,d`.
pub fn parse_quad(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected four comma-separated integers, got '{s}'"))?;
    <[usize; 4]>::try_from(parts)
        .map_err(|_| format!("expected four comma-separated integers, got '{s}'"))
}
