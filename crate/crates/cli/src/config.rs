//! Run configuration: defaults, TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tms_core::classify::{Method, TmsParams};
use tms_core::data::TimeMode;
use tms_core::error::{Error, Result};
use tms_core::factor::DesignKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Trajectory CSV files.
    pub input: Vec<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 defers to `TMS_THREADS`, then to all cores.
    pub threads: usize,
    pub time_mode: TimeMode,
    /// Conditions to process; empty means all.
    pub conditions: Vec<String>,
    pub model: TmsParams,
    pub align: AlignConfig,
    pub classify: ClassifyConfig,
    pub cv: CvConfig,
    pub factor: FactorConfig,
    pub simulate: SimulateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    /// Previously fitted model files; the data are fitted afresh if empty.
    pub models: Vec<PathBuf>,
    /// Points of the template grid in the output.
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Trajectory files with the curves to classify.
    pub test: Vec<PathBuf>,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub grid: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub q: usize,
    pub design: DesignKind,
    /// Height labels in design order; the first is the reference.
    pub height_labels: Vec<String>,
    /// Covariate of each height level for the regression design.
    pub height_values: Vec<f64>,
    /// Conditions are named `<analysis><separator><height label>`.
    pub separator: String,
    /// Also fit the other design and report the likelihood-ratio test.
    pub lrt: bool,
    /// Loadings counts for the scree export; defaults to `[q]`.
    pub scree_q: Vec<usize>,
    pub ellipsoid_points: usize,
    pub ellipsoid_level: f64,
    pub max_sweeps: usize,
    /// Previously fitted warp models; the acceleration profiles are fitted if empty.
    pub models: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    Recovery,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulateMode,
    pub n_sim: usize,
    pub participants: usize,
    pub repetitions: usize,
    pub grid_points: usize,
    /// Seed of the participant effects of the reference scenario.
    pub truth_seed: u64,
    pub quadrature_points: usize,
    /// Specification used to fit each replicate.
    pub fit: TmsParams,
}

impl RunConfig {
    /// Defaults for a time mode. Model hyperparameters follow the values
    /// selected by cross-validation on the motion-capture data.
    pub fn defaults(mode: TimeMode) -> Self {
        let model = match mode {
            TimeMode::Percentual => TmsParams::default(),
            TimeMode::Recorded => TmsParams {
                n_basis: 23,
                n_w: 2,
                lambda: 2.0,
                mu: 2.0,
                ..TmsParams::default()
            },
        };
        Self {
            input: Vec::new(),
            output: PathBuf::from("tms-out"),
            seed: 1,
            threads: 0,
            time_mode: mode,
            conditions: Vec::new(),
            align: AlignConfig {
                models: Vec::new(),
                grid_points: 101,
            },
            classify: ClassifyConfig {
                test: Vec::new(),
                method: Method::Tms(model.clone()),
            },
            cv: CvConfig {
                folds: 5,
                grid: vec![Method::Tms(model.clone())],
            },
            factor: FactorConfig {
                q: 8,
                design: DesignKind::Regression,
                height_labels: vec!["S".into(), "M".into(), "T".into()],
                height_values: vec![0.0, 7.5, 15.0],
                separator: "/".into(),
                lrt: true,
                scree_q: Vec::new(),
                ellipsoid_points: 8,
                ellipsoid_level: 0.95,
                max_sweeps: 5000,
                models: Vec::new(),
            },
            simulate: SimulateConfig {
                mode: SimulateMode::Recovery,
                n_sim: 100,
                participants: 10,
                repetitions: 10,
                grid_points: 100,
                truth_seed: 1,
                quadrature_points: 200,
                fit: TmsParams {
                    mu: 6.2,
                    ..TmsParams::default()
                },
            },
            model,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub time_mode: Option<String>,
    /// `dotted.key=value` pairs, values in TOML syntax (bare words are strings).
    pub set: Vec<String>,
}

/// Deep merge; a table that switches its `method` tag replaces the old one
/// so that fields of the previous method do not leak into the new one.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if o.get("method").filter(|m| m.is_str()).is_none_or(|m| b.get("method") == Some(m)) =>
            {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in '{key}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Resolves defaults ← file ← overrides.
pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut user = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if !ov.input.is_empty() {
        let list = ov.input.iter().map(|p| toml::Value::String(p.display().to_string())).collect();
        user.insert("input".into(), toml::Value::Array(list));
    }
    if let Some(o) = &ov.output {
        user.insert("output".into(), toml::Value::String(o.display().to_string()));
    }
    if let Some(s) = ov.seed {
        let s = i64::try_from(s).map_err(|_| Error::Config("seed too large".into()))?;
        user.insert("seed".into(), toml::Value::Integer(s));
    }
    if let Some(t) = ov.threads {
        user.insert("threads".into(), toml::Value::Integer(t as i64));
    }
    if let Some(m) = &ov.time_mode {
        user.insert("time_mode".into(), toml::Value::String(m.clone()));
    }
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        set_dotted(&mut user, k.trim(), parse_value(v.trim()))?;
    }
    let mode: TimeMode = match user.get("time_mode") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("time_mode: {e}")))?,
        None => TimeMode::Percentual,
    };
    let mut base = toml::Table::try_from(RunConfig::defaults(mode)).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, user);
    toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn check_files(what: &str, paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    /// Validates the options used by `command`; referenced files must exist.
    pub fn validate(&self, command: &str) -> Result<()> {
        if command != "simulate" {
            if self.input.is_empty() {
                return Err(Error::Config("no input files given".into()));
            }
            check_files("input", &self.input)?;
        }
        self.model.to_spec().map_err(|e| Error::Config(format!("model: {e}")))?;
        match command {
            "align" => {
                check_files("model", &self.align.models)?;
                if self.align.grid_points < 2 {
                    return Err(Error::Config("align.grid_points must be at least 2".into()));
                }
            }
            "classify" => {
                if self.classify.test.is_empty() {
                    return Err(Error::Config("classify.test lists no files".into()));
                }
                check_files("test", &self.classify.test)?;
            }
            "cv" => {
                if self.cv.grid.is_empty() {
                    return Err(Error::Config("cv.grid is empty".into()));
                }
                if self.cv.folds < 2 {
                    return Err(Error::Config("cv.folds must be at least 2".into()));
                }
            }
            "factor" => {
                let f = &self.factor;
                positive("factor.q", f.q)?;
                if f.height_labels.is_empty() || f.separator.is_empty() {
                    return Err(Error::Config("factor.height_labels and factor.separator must be non-empty".into()));
                }
                if f.height_values.len() != f.height_labels.len() {
                    return Err(Error::Config(format!(
                        "factor.height_values has {} entries for {} height labels",
                        f.height_values.len(),
                        f.height_labels.len()
                    )));
                }
                if !(f.ellipsoid_level > 0.0 && f.ellipsoid_level < 1.0) {
                    return Err(Error::Config("factor.ellipsoid_level must lie in (0, 1)".into()));
                }
                positive("factor.max_sweeps", f.max_sweeps)?;
                f.scree_q.iter().try_for_each(|&q| positive("factor.scree_q entries", q))?;
                check_files("model", &f.models)?;
            }
            "simulate" => {
                let s = &self.simulate;
                positive("simulate.n_sim", s.n_sim)?;
                positive("simulate.participants", s.participants)?;
                positive("simulate.repetitions", s.repetitions)?;
                if s.grid_points < 2 || s.quadrature_points < 2 {
                    return Err(Error::Config("simulate grids need at least 2 points".into()));
                }
                s.fit.to_spec().map_err(|e| Error::Config(format!("simulate.fit: {e}")))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Worker threads after applying the environment default.
    pub fn worker_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        std::env::var("TMS_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or(0)
    }
}
