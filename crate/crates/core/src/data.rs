//! Trajectory ingestion, derived signals and normalization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recorded channels of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Scalar(Vec<f64>),
    Spatial(Vec<[f64; 3]>),
}

impl Channels {
    pub fn len(&self) -> usize {
        match self {
            Channels::Scalar(v) => v.len(),
            Channels::Spatial(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One recorded trajectory. Times are strictly increasing; occluded samples
/// are simply absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub condition: String,
    pub participant: String,
    pub repetition: u32,
    pub times: Vec<f64>,
    pub channels: Channels,
}

impl RawTrajectory {
    pub fn label(&self) -> String {
        format!(
            "condition {} participant {} repetition {}",
            self.condition, self.participant, self.repetition
        )
    }

    pub fn coords(&self) -> Result<&[[f64; 3]]> {
        match &self.channels {
            Channels::Spatial(c) => Ok(c),
            Channels::Scalar(_) => Err(Error::Validation(format!(
                "{} has scalar values, spatial coordinates required",
                self.label()
            ))),
        }
    }

    /// The trajectory as a functional sample, for scalar recordings.
    pub fn to_sample(&self) -> Result<FunctionalSample> {
        match &self.channels {
            Channels::Scalar(v) => Ok(FunctionalSample {
                condition: self.condition.clone(),
                participant: self.participant.clone(),
                repetition: self.repetition,
                times: self.times.clone(),
                values: v.clone(),
            }),
            Channels::Spatial(_) => Err(Error::Validation(format!(
                "{} has spatial coordinates, scalar values required",
                self.label()
            ))),
        }
    }
}

/// One observed curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub condition: String,
    pub participant: String,
    pub repetition: u32,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl FunctionalSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Column names of the trajectory CSV format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub condition: String,
    pub participant: String,
    pub repetition: String,
    pub time: String,
    pub value: String,
    pub x: String,
    pub y: String,
    pub z: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            condition: "condition".into(),
            participant: "participant".into(),
            repetition: "repetition".into(),
            time: "time".into(),
            value: "value".into(),
            x: "x".into(),
            y: "y".into(),
            z: "z".into(),
        }
    }
}

pub fn ingest_csv(path: &Path) -> Result<Vec<RawTrajectory>> {
    ingest_csv_with(path, &CsvSchema::default())
}

pub fn ingest_csv_with(path: &Path, schema: &CsvSchema) -> Result<Vec<RawTrajectory>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(e).context(format!("reading {}", path.display())))?;
    ingest_reader(file, schema)
}

enum Layout {
    Scalar(usize),
    Spatial([usize; 3]),
}

/// Reads trajectories from CSV with a header row.
///
/// Rows are grouped by (condition, participant, repetition) and sorted by
/// time. Groups are returned in lexicographic key order.
pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<RawTrajectory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let ci = need(&schema.condition)?;
    let pi = need(&schema.participant)?;
    let ri = need(&schema.repetition)?;
    let ti = need(&schema.time)?;
    let layout = match (col(&schema.value), col(&schema.x), col(&schema.y), col(&schema.z)) {
        (Some(v), _, _, _) => Layout::Scalar(v),
        (None, Some(x), Some(y), Some(z)) => Layout::Spatial([x, y, z]),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected a '{}' column or '{}', '{}', '{}' columns",
                    schema.value, schema.x, schema.y, schema.z
                ),
            })
        }
    };

    type Key = (String, String, u32);
    let mut groups: BTreeMap<Key, Vec<(f64, [f64; 3])>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {}", i + 1),
            })
        };
        let number = |i: usize| -> Result<f64> {
            let s = field(i)?;
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("'{s}' in column '{}' is not a number", &headers[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value in column '{}'", &headers[i]),
                });
            }
            Ok(v)
        };
        let rep_s = field(ri)?;
        let repetition: u32 = rep_s.parse().ok().filter(|&r| r > 0).ok_or_else(|| Error::Parse {
            line,
            message: format!("repetition '{rep_s}' is not a positive integer"),
        })?;
        let t = number(ti)?;
        let v = match layout {
            Layout::Scalar(i) => [number(i)?, 0.0, 0.0],
            Layout::Spatial([x, y, z]) => [number(x)?, number(y)?, number(z)?],
        };
        groups
            .entry((field(ci)?.to_string(), field(pi)?.to_string(), repetition))
            .or_default()
            .push((t, v));
    }

    let mut out = Vec::with_capacity(groups.len());
    for ((condition, participant, repetition), mut rows) in groups {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(p) = rows.windows(2).find(|p| p[0].0 == p[1].0) {
            return Err(Error::Validation(format!(
                "condition {condition} participant {participant} repetition {repetition}: \
                 duplicate time {}",
                p[0].0
            )));
        }
        let times = rows.iter().map(|r| r.0).collect();
        let channels = match layout {
            Layout::Scalar(_) => Channels::Scalar(rows.iter().map(|r| r.1[0]).collect()),
            Layout::Spatial(_) => Channels::Spatial(rows.iter().map(|r| r.1).collect()),
        };
        out.push(RawTrajectory {
            condition,
            participant,
            repetition,
            times,
            channels,
        });
    }
    Ok(out)
}

/// Writes scalar samples in the `condition,participant,repetition,time,value` layout.
pub fn write_samples_csv<W: Write>(writer: W, samples: &[FunctionalSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["condition", "participant", "repetition", "time", "value"])
        .map_err(csv_err)?;
    for s in samples {
        for (t, v) in s.times.iter().zip(&s.values) {
            w.write_record([
                s.condition.clone(),
                s.participant.clone(),
                s.repetition.to_string(),
                format!("{t}"),
                format!("{v}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes spatial trajectories in the `condition,participant,repetition,time,x,y,z` layout.
pub fn write_trajectories_csv<W: Write>(writer: W, trajs: &[RawTrajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["condition", "participant", "repetition", "time", "x", "y", "z"])
        .map_err(csv_err)?;
    for tr in trajs {
        let coords = tr.coords()?;
        for (t, c) in tr.times.iter().zip(coords) {
            w.write_record([
                tr.condition.clone(),
                tr.participant.clone(),
                tr.repetition.to_string(),
                format!("{t}"),
                format!("{}", c[0]),
                format!("{}", c[1]),
                format!("{}", c[2]),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Acceleration of the speed profile.
///
/// Speeds are difference quotients located at segment midpoints; the
/// acceleration is the difference quotient of consecutive speeds, located
/// halfway between their midpoints. The output has two points fewer than
/// the input and times are still in seconds.
pub fn acceleration_profile(traj: &RawTrajectory) -> Result<FunctionalSample> {
    let coords = traj.coords()?;
    let n = traj.times.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "{} has {n} points, at least 4 are needed",
            traj.label()
        )));
    }
    let t = &traj.times;
    let mut mid = Vec::with_capacity(n - 1);
    let mut speed = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let dt = t[k + 1] - t[k];
        if !(dt > 0.0) {
            return Err(Error::Validation(format!("{}: times not strictly increasing", traj.label())));
        }
        let d: f64 = (0..3).map(|c| (coords[k + 1][c] - coords[k][c]).powi(2)).sum::<f64>().sqrt();
        mid.push(0.5 * (t[k] + t[k + 1]));
        speed.push(d / dt);
    }
    let mut times = Vec::with_capacity(n - 2);
    let mut values = Vec::with_capacity(n - 2);
    for k in 0..n - 2 {
        times.push(0.5 * (mid[k] + mid[k + 1]));
        values.push((speed[k + 1] - speed[k]) / (mid[k + 1] - mid[k]));
    }
    Ok(FunctionalSample {
        condition: traj.condition.clone(),
        participant: traj.participant.clone(),
        repetition: traj.repetition,
        times,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// One shared affine time map of the global span onto [0, 1].
    Recorded,
    /// Each sample's own span mapped onto [0, 1].
    #[default]
    Percentual,
}

impl std::str::FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recorded" => Ok(TimeMode::Recorded),
            "percentual" => Ok(TimeMode::Percentual),
            other => Err(Error::Config(format!(
                "unknown time mode '{other}' (expected recorded or percentual)"
            ))),
        }
    }
}

/// Maps applied by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mode: TimeMode,
    /// Global time origin and span (recorded mode only; percentual uses per-sample spans).
    pub time_origin: f64,
    pub time_span: f64,
    /// Values are divided by this global span.
    pub value_span: f64,
}

/// Samples of one participant, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSamples {
    pub participant: String,
    pub samples: Vec<FunctionalSample>,
}

/// Normalized samples grouped by participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDataset {
    pub participants: Vec<ParticipantSamples>,
    pub normalization: Normalization,
}

impl ConditionDataset {
    /// Groups already normalized samples; participants appear in order of
    /// first occurrence.
    pub fn from_samples(samples: Vec<FunctionalSample>, normalization: Normalization) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no samples".into()));
        }
        let mut participants: Vec<ParticipantSamples> = Vec::new();
        for s in samples {
            validate_sample(&s)?;
            match participants.iter_mut().find(|p| p.participant == s.participant) {
                Some(p) => p.samples.push(s),
                None => participants.push(ParticipantSamples {
                    participant: s.participant.clone(),
                    samples: vec![s],
                }),
            }
        }
        Ok(Self {
            participants,
            normalization,
        })
    }

    pub fn n_participants(&self) -> usize {
        self.participants.len()
    }

    /// Number of observations of participant `i`.
    pub fn m_i(&self, i: usize) -> usize {
        self.participants[i].samples.iter().map(|s| s.len()).sum()
    }

    /// Total number of observations.
    pub fn m(&self) -> usize {
        (0..self.n_participants()).map(|i| self.m_i(i)).sum()
    }

    pub fn n_curves(&self) -> usize {
        self.participants.iter().map(|p| p.samples.len()).sum()
    }

    pub fn samples(&self) -> impl Iterator<Item = &FunctionalSample> {
        self.participants.iter().flat_map(|p| p.samples.iter())
    }

    /// Samples of one condition, keeping the normalization.
    pub fn filter_condition(&self, condition: &str) -> Result<Self> {
        let samples: Vec<FunctionalSample> =
            self.samples().filter(|s| s.condition == condition).cloned().collect();
        if samples.is_empty() {
            return Err(Error::InsufficientData(format!("no samples for condition '{condition}'")));
        }
        Self::from_samples(samples, self.normalization)
    }

    pub fn conditions(&self) -> Vec<String> {
        let mut c: Vec<String> = self.samples().map(|s| s.condition.clone()).collect();
        c.sort();
        c.dedup();
        c
    }
}

fn validate_sample(s: &FunctionalSample) -> Result<()> {
    let label = || format!("participant {} repetition {}", s.participant, s.repetition);
    if s.times.len() != s.values.len() {
        return Err(Error::Validation(format!("{}: times and values differ in length", label())));
    }
    if s.len() < 2 {
        return Err(Error::InsufficientData(format!("{}: fewer than 2 observations", label())));
    }
    if s.values.iter().chain(&s.times).any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{}: non-finite entries", label())));
    }
    if s.times.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::Validation(format!("{}: times not strictly increasing", label())));
    }
    Ok(())
}

/// Rescales time and values.
///
/// Values are divided by the global value span (max − min over all
/// samples), so zero stays zero and the span becomes 1. Time is mapped
/// according to `mode`.
pub fn normalize(samples: &[FunctionalSample], mode: TimeMode) -> Result<ConditionDataset> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples to normalize".into()));
    }
    for s in samples {
        validate_sample(s)?;
    }
    let (vmin, vmax) = samples
        .iter()
        .flat_map(|s| s.values.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let value_span = vmax - vmin;
    if !(value_span > 0.0) {
        return Err(Error::DegenerateData("values have zero span".into()));
    }
    let (tmin, tmax) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
            (a.min(s.times[0]), b.max(*s.times.last().unwrap()))
        });
    let norm = Normalization {
        mode,
        time_origin: tmin,
        time_span: tmax - tmin,
        value_span,
    };
    let out: Vec<FunctionalSample> = samples.iter().map(|s| norm.map_sample(s)).collect();
    ConditionDataset::from_samples(out, norm)
}

impl Normalization {
    fn map_sample(&self, s: &FunctionalSample) -> FunctionalSample {
        let (origin, span) = match self.mode {
            TimeMode::Recorded => (self.time_origin, self.time_span),
            TimeMode::Percentual => (s.times[0], s.times.last().unwrap() - s.times[0]),
        };
        let last = s.times.len() - 1;
        let times = s
            .times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                // Pin the span endpoints exactly.
                if t == origin {
                    0.0
                } else if t == origin + span || (self.mode == TimeMode::Percentual && k == last) {
                    1.0
                } else {
                    ((t - origin) / span).clamp(0.0, 1.0)
                }
            })
            .collect();
        FunctionalSample {
            times,
            values: s.values.iter().map(|v| v / self.value_span).collect(),
            ..s.clone()
        }
    }

    /// Maps new samples with the maps fitted on training data. Recorded
    /// times outside the training span are clamped to [0, 1].
    pub fn apply(&self, samples: &[FunctionalSample]) -> Result<Vec<FunctionalSample>> {
        samples
            .iter()
            .map(|s| {
                validate_sample(s)?;
                let out = self.map_sample(s);
                if out.times.windows(2).any(|p| !(p[1] > p[0])) {
                    return Err(Error::Validation(format!(
                        "participant {} repetition {}: times collapse outside the training time span",
                        s.participant, s.repetition
                    )));
                }
                Ok(out)
            })
            .collect()
    }
}
