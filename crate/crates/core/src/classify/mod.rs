//! Participant identification from single curves and chronological
//! cross-validation of the classifiers.

mod dtw;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cov::{MaternKernel, WarpKernel};
use crate::data::{ConditionDataset, FunctionalSample, ParticipantSamples};
use crate::error::{Error, Result};
use crate::mixedmodel::{fit, posterior_distance, FittedModel, ModelSpec};
use crate::warp::{Interpolation, WarpConfig};

pub use dtw::{dtw_align, dtw_template, resample_linear, DtwAlignment, StepPattern};

/// Points of the common grid used by the L² based classifiers.
pub const EVAL_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarpFamily {
    #[default]
    Bridge,
    Motion,
}

/// Hyperparameters of the timing-and-motion-separation classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmsParams {
    pub n_basis: usize,
    pub n_w: usize,
    pub lambda: f64,
    pub mu: f64,
    pub interpolation: Interpolation,
    pub warp_family: WarpFamily,
    pub estimate_smoothness: bool,
    pub i_max: usize,
    pub j_max: usize,
    /// Starting values of the variance search.
    pub gamma2: f64,
    pub tau2: f64,
    pub alpha: f64,
}

impl Default for TmsParams {
    fn default() -> Self {
        Self {
            n_basis: 12,
            n_w: 1,
            lambda: 0.0,
            mu: 1.0,
            interpolation: Interpolation::Linear,
            warp_family: WarpFamily::Bridge,
            estimate_smoothness: false,
            i_max: 5,
            j_max: 5,
            gamma2: 1.0,
            tau2: 1.0,
            alpha: 10.0,
        }
    }
}

impl TmsParams {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let warp_kernel = match self.warp_family {
            WarpFamily::Bridge => WarpKernel::bridge(self.gamma2)?,
            WarpFamily::Motion => WarpKernel::motion(self.gamma2)?,
        };
        let mut spec = ModelSpec::new(
            SplineBasis::equidistant(self.n_basis, 3)?,
            WarpConfig::new(self.n_w, self.interpolation),
            MaternKernel::new(self.tau2, self.alpha, self.mu)?,
            warp_kernel,
        );
        spec.lambda = self.lambda;
        spec.estimate_smoothness = self.estimate_smoothness;
        spec.i_max = self.i_max;
        spec.j_max = self.j_max;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtwParams {
    /// Basis functions of the template spline.
    pub spline_df: usize,
    pub iterations: usize,
    pub pattern: StepPattern,
}

impl Default for DtwParams {
    fn default() -> Self {
        Self {
            spline_df: 20,
            iterations: 5,
            pattern: StepPattern::Asymmetric,
        }
    }
}

/// A classification method with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Least negative log posterior under each participant's fitted model.
    Tms(TmsParams),
    /// Nearest training curve in L².
    Np,
    /// L² distance to each participant's DTW template.
    Dtw(DtwParams),
}

/// A trainable classifier; implement it to plug further methods into
/// [`cross_validate`].
pub trait Classifier: Sync {
    fn name(&self) -> String;
    fn params_json(&self) -> String;
    fn train(&self, train: &ConditionDataset) -> Result<Box<dyn Predictor>>;
}

/// A trained classifier: distances of a curve to each training participant.
pub trait Predictor: Send + Sync {
    fn participants(&self) -> &[String];
    fn distances(&self, sample: &FunctionalSample) -> Result<Vec<f64>>;

    /// Index of the closest participant; ties go to the lowest index.
    fn predict(&self, sample: &FunctionalSample) -> Result<usize> {
        let d = self.distances(sample)?;
        argmin(&d).ok_or_else(|| {
            Error::DegenerateData(format!(
                "no finite distance for {} {} {}",
                sample.condition, sample.participant, sample.repetition
            ))
        })
    }
}

impl Classifier for Method {
    fn name(&self) -> String {
        match self {
            Method::Tms(_) => "tms",
            Method::Np => "np",
            Method::Dtw(_) => "dtw",
        }
        .into()
    }

    fn params_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }

    fn train(&self, train: &ConditionDataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(self.train_method(train)?))
    }
}

impl Method {
    /// Trains on `train`; participants keep the order of `train`.
    pub fn train_method(&self, train: &ConditionDataset) -> Result<Trained> {
        let participants = train.participants.iter().map(|p| p.participant.clone()).collect();
        let kind = match self {
            Method::Tms(p) => TrainedKind::Tms(Box::new(fit(train, &p.to_spec()?)?)),
            Method::Np => TrainedKind::Np(
                train
                    .participants
                    .iter()
                    .map(|p| p.samples.iter().map(on_eval_grid).collect())
                    .collect(),
            ),
            Method::Dtw(p) => TrainedKind::Dtw(
                train
                    .participants
                    .iter()
                    .map(|ps| {
                        let curves: Vec<Vec<f64>> = ps.samples.iter().map(on_eval_grid).collect();
                        dtw_template(&curves, p.spline_df, p.iterations, p.pattern)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Trained { participants, kind })
    }
}

enum TrainedKind {
    Tms(Box<FittedModel>),
    Np(Vec<Vec<Vec<f64>>>),
    Dtw(Vec<Vec<f64>>),
}

/// Training artifacts of one method.
pub struct Trained {
    pub participants: Vec<String>,
    kind: TrainedKind,
}

fn on_eval_grid(s: &FunctionalSample) -> Vec<f64> {
    resample_linear(&s.times, &s.values, EVAL_POINTS)
}

/// Trapezoid integral of the squared difference on the evaluation grid.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let h = 1.0 / (a.len() - 1) as f64;
    let sq: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
    (1..sq.len()).map(|k| 0.5 * h * (sq[k] + sq[k - 1])).sum()
}

impl Trained {
    pub fn fitted_model(&self) -> Option<&FittedModel> {
        match &self.kind {
            TrainedKind::Tms(m) => Some(m),
            _ => None,
        }
    }
}

impl Predictor for Trained {
    fn participants(&self) -> &[String] {
        &self.participants
    }

    fn distances(&self, sample: &FunctionalSample) -> Result<Vec<f64>> {
        match &self.kind {
            TrainedKind::Tms(model) => (0..self.participants.len())
                .map(|i| posterior_distance(model, i, sample))
                .collect(),
            TrainedKind::Np(curves) => {
                let x = on_eval_grid(sample);
                Ok(curves
                    .iter()
                    .map(|cs| cs.iter().map(|c| l2_distance(&x, c)).fold(f64::INFINITY, f64::min))
                    .collect())
            }
            TrainedKind::Dtw(templates) => {
                let x = on_eval_grid(sample);
                Ok(templates.iter().map(|t| l2_distance(&x, t)).collect())
            }
        }
    }
}

fn argmin(d: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, v) in d.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v < d[b]) {
            best = Some(k);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub condition: String,
    pub participant: String,
    pub repetition: u32,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
}

impl Classification {
    /// Counts keyed by true then predicted participant.
    pub fn confusion(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut m: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for p in &self.predictions {
            *m.entry(p.participant.clone())
                .or_default()
                .entry(p.predicted.clone())
                .or_default() += 1;
        }
        m
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.predictions {
            w.serialize(p).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Classifies `test` with trained artifacts. Every test participant must
/// be among the trained ones.
pub fn classify(trained: &dyn Predictor, test: &[FunctionalSample]) -> Result<Classification> {
    if test.is_empty() {
        return Err(Error::InsufficientData("no test samples".into()));
    }
    for s in test {
        if !trained.participants().contains(&s.participant) {
            return Err(Error::Config(format!("no trained model for participant '{}'", s.participant)));
        }
    }
    let predictions: Vec<Prediction> = test
        .par_iter()
        .map(|s| {
            let k = trained.predict(s)?;
            Ok(Prediction {
                condition: s.condition.clone(),
                participant: s.participant.clone(),
                repetition: s.repetition,
                predicted: trained.participants()[k].clone(),
            })
        })
        .collect::<Result<_>>()?;
    let correct = predictions.iter().filter(|p| p.participant == p.predicted).count();
    Ok(Classification {
        accuracy: correct as f64 / predictions.len() as f64,
        predictions,
    })
}

/// Chronological folds: the repetitions of each participant, sorted by
/// label, are split into `folds` consecutive blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

impl CvPlan {
    /// Fold of the repetition with 0-based rank `rank` among `n` repetitions.
    pub fn fold_of(&self, rank: usize, n: usize) -> usize {
        rank * self.folds / n
    }

    /// Training and test sets of fold `f`.
    pub fn split(&self, data: &ConditionDataset, f: usize) -> Result<(ConditionDataset, Vec<FunctionalSample>)> {
        let mut train = Vec::with_capacity(data.participants.len());
        let mut test = Vec::new();
        for p in &data.participants {
            let n = p.samples.len();
            if n < self.folds {
                return Err(Error::InsufficientData(format!(
                    "participant '{}' has {n} repetitions, fewer than {} folds",
                    p.participant, self.folds
                )));
            }
            let mut order: Vec<&FunctionalSample> = p.samples.iter().collect();
            order.sort_by_key(|s| s.repetition);
            let mut kept = Vec::new();
            for (rank, s) in order.into_iter().enumerate() {
                if self.fold_of(rank, n) == f {
                    test.push(s.clone());
                } else {
                    kept.push(s.clone());
                }
            }
            train.push(ParticipantSamples {
                participant: p.participant.clone(),
                samples: kept,
            });
        }
        Ok((
            ConditionDataset {
                participants: train,
                normalization: data.normalization,
            },
            test,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub method: String,
    pub param_json: String,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Index of the selected grid point.
    pub best: usize,
    pub best_params_json: String,
    pub best_accuracy: f64,
    /// Mean accuracy per grid point, in grid order.
    pub mean_accuracy: Vec<f64>,
    pub rows: Vec<CvRow>,
}

impl CvResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates every grid point on every fold and returns the point with the
/// highest mean accuracy (first in grid order on ties).
pub fn cross_validate<C: Classifier>(data: &ConditionDataset, grid: &[C], plan: CvPlan) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Config("cross-validation grid is empty".into()));
    }
    if plan.folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let splits: Vec<_> = (0..plan.folds).map(|f| plan.split(data, f)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..plan.folds).map(move |f| (g, f))).collect();
    let acc: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let (train, test) = &splits[f];
            let trained = grid[g]
                .train(train)
                .map_err(|e| e.context(format!("{} fold {f}", grid[g].name())))?;
            Ok(classify(trained.as_ref(), test)?.accuracy)
        })
        .collect::<Result<_>>()?;
    let rows = jobs
        .iter()
        .zip(&acc)
        .map(|(&(g, f), &a)| CvRow {
            method: grid[g].name(),
            param_json: grid[g].params_json(),
            fold: f,
            accuracy: a,
        })
        .collect();
    let mean_accuracy: Vec<f64> = (0..grid.len())
        .map(|g| acc[g * plan.folds..(g + 1) * plan.folds].iter().sum::<f64>() / plan.folds as f64)
        .collect();
    let mut best = 0;
    for (g, &m) in mean_accuracy.iter().enumerate() {
        if m > mean_accuracy[best] {
            best = g;
        }
    }
    Ok(CvResult {
        best,
        best_params_json: grid[best].params_json(),
        best_accuracy: mean_accuracy[best],
        mean_accuracy,
        rows,
    })
}
