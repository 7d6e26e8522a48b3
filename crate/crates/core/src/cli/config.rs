//! TOML run configuration. Every key is optional; flags override it and
//! built-in defaults fill the rest. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// `edm` or `vp`.
    pub kind: Option<String>,
    pub beta_d: Option<f64>,
    pub beta_min: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Generate the dataset instead of loading it.
    pub synthetic: Option<SyntheticSpec>,
}

/// A time grid given as `"lo:hi:count"` (log-spaced) or an explicit list.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Spec(String),
    List(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub t_grid: Option<GridValue>,
    pub points: Option<usize>,
    pub reps: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub n: Option<usize>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    pub bound: Option<String>,
    pub trials: Option<usize>,
    pub k: Option<usize>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: Option<usize>,
    pub solver: Option<String>,
    /// `exact`, `knn` or `uniform`.
    pub score: Option<String>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub t_switch: Option<f64>,
    pub handoff: Option<String>,
    pub grid: Option<String>,
    pub samples: Option<usize>,
    pub shared_batch: Option<bool>,
    pub trace: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Parses `"lo:hi:count"` into a log-spaced grid, or a comma list of times.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Argument(format!("cannot parse time grid {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    let grid = if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi > lo) || count == 0 {
            return Err(bad());
        }
        crate::analysis::log_grid(lo, hi, count)
    } else {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    Ok(grid)
}

impl GridValue {
    pub fn resolve(&self) -> Result<Vec<f64>> {
        match self {
            GridValue::Spec(s) => parse_grid(s),
            GridValue::List(v) => Ok(v.clone()),
        }
    }
}
