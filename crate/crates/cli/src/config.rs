//! Run configuration: a JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use fair_itr::dataset::{load_csv, CsvSchema};
use fair_itr::simgen::{generate, ExperimentConfig};
use fair_itr::{fit_penalized_logistic, Dataset, KernelKind};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    /// Held-out data for `sweep` with a CSV source.
    pub test_data: Option<DataSource>,
    /// Model file for `predict` and `evaluate`.
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub seed: u64,
    pub reps: Option<usize>,
    #[serde(default = "one")]
    pub parallelism: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        #[serde(default)]
        propensity: Propensity,
    },
    Experiment(ExperimentConfig),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Propensity {
    /// Empirical treatment frequency.
    #[default]
    Constant,
    /// Ridge-penalized logistic regression on `(X, S)`.
    Logistic { penalty: f64 },
}

/// A number or one of the named strategies.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Choice {
    Value(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Budgets {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "linear")]
    pub kernel: KernelKind,
    /// Bandwidth, `"median"` or `"cv"`.
    #[serde(default = "median")]
    pub sigma: Choice,
    /// `"none"`, `"linear"` or `"nonlinear"`.
    #[serde(default = "nonlinear")]
    pub proxy: String,
    /// Positive number or `"cv"`.
    #[serde(default = "default_kappa")]
    pub kappa: Choice,
    #[serde(default = "default_c")]
    pub c: Budgets,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub standardize: bool,
}

fn linear() -> KernelKind {
    KernelKind::Linear
}
fn median() -> Choice {
    Choice::Named("median".into())
}
fn nonlinear() -> String {
    "nonlinear".into()
}
fn default_kappa() -> Choice {
    Choice::Value(0.1)
}
fn default_c() -> Budgets {
    Budgets::One(0.1)
}
fn yes() -> bool {
    true
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kernel: linear(),
            sigma: median(),
            proxy: nonlinear(),
            kappa: default_kappa(),
            c: default_c(),
            intercept: true,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default = "default_factors")]
    pub sigma_factors: Vec<f64>,
    #[serde(default = "default_grid")]
    pub c_grid: Vec<f64>,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_kappas() -> Vec<f64> {
    vec![0.1, 1.0]
}
fn default_factors() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_grid() -> Vec<f64> {
    fair_itr::simgen::BUDGET_GRID.to_vec()
}
fn default_degree() -> usize {
    3
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig { kappas: default_kappas(), sigma_factors: default_factors(), c_grid: default_grid(), degree: default_degree() }
    }
}

/// Sets `path` (dot separated) in `doc` to `raw`, parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!("override key `{key}` has an empty segment")));
        }
        let obj = match node {
            Value::Object(map) => map,
            _ => return Err(CliError::config(format!("override `{key}`: `{}` is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_path_to_error::deserialize(doc).map_err(|e| CliError::config(format!("config field `{}`: {}", e.path(), e.inner())))
}

impl RunConfig {
    pub fn require_data(&self) -> Result<&DataSource, CliError> {
        self.data.as_ref().ok_or_else(|| CliError::config("config field `data` is required".into()))
    }
}

/// Loads a data source with propensities filled and rewards shifted to be
/// nonnegative. `seed` replaces the experiment seed when given.
pub fn load_data(src: &DataSource, seed: Option<u64>) -> Result<Dataset, CliError> {
    match src {
        DataSource::Csv { path, schema, propensity } => {
            let d = load_csv(path, schema)?;
            let d = match propensity {
                Propensity::Constant => d.set_constant_propensity()?,
                Propensity::Logistic { penalty } => {
                    let model = fit_penalized_logistic(&d, *penalty)?;
                    d.apply_propensity(&model)?
                }
            };
            Ok(d.shift_rewards())
        }
        DataSource::Experiment(cfg) => {
            let mut cfg = cfg.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(generate(&cfg)?)
        }
    }
}
