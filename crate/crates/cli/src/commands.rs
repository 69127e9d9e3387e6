//! Implementation of the subcommands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tms_core::classify::{classify, cross_validate, CvPlan, Method};
use tms_core::data::{
    acceleration_profile, ingest_csv, normalize, write_samples_csv, Channels, ConditionDataset, FunctionalSample,
    RawTrajectory, TimeMode,
};
use tms_core::error::{Error, Result};
use tms_core::factor::{
    fit_factor, lrt_linear_height, path_ellipsoids, resample_path, variance_decomposition, AlignmentWarp,
    DesignKind, EcmSettings, FactorData, FactorDesign, PathObservation, LEVEL_NAMES,
};
use tms_core::mixedmodel::{fit, FittedModel};
use tms_core::simulate::{recovery_study, simulate_dataset, RecoveryConfig, SimDesign, Truth};
use tms_core::warp::{combined_values, eval_warp};

use crate::config::{RunConfig, SimulateMode};
use crate::output::{num, sanitize, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Align,
    Classify,
    Cv,
    Factor,
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Align => "align",
            Command::Classify => "classify",
            Command::Cv => "cv",
            Command::Factor => "factor",
            Command::Simulate => "simulate",
        }
    }
}

/// Runs `command` and returns the directory holding its results.
pub fn run(command: Command, cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(command.name())?;
    std::fs::create_dir_all(&cfg.output)?;
    let stage = Stage::new(&cfg.output, command.name())?;
    let result = match command {
        Command::Fit => run_fit(cfg, &stage),
        Command::Align => run_align(cfg, &stage),
        Command::Classify => run_classify(cfg, &stage),
        Command::Cv => run_cv(cfg, &stage),
        Command::Factor => run_factor(cfg, &stage),
        Command::Simulate => run_simulate(cfg, &stage),
    };
    match result {
        Ok(()) => stage.commit(),
        Err(e) => {
            stage.abort();
            Err(e)
        }
    }
}

fn load(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<RawTrajectory>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(ingest_csv(p).map_err(|e| e.context(p.display().to_string()))?);
    }
    if cfg.conditions.is_empty() {
        return Ok(all);
    }
    for c in &cfg.conditions {
        if !all.iter().any(|t| &t.condition == c) {
            return Err(Error::InsufficientData(format!("condition '{c}' not found in the input")));
        }
    }
    all.retain(|t| cfg.conditions.contains(&t.condition));
    Ok(all)
}

/// Scalar recordings as they are, spatial recordings as acceleration profiles.
fn functional(trajs: &[RawTrajectory]) -> Result<Vec<FunctionalSample>> {
    trajs
        .iter()
        .map(|t| match t.channels {
            Channels::Scalar(_) => t.to_sample(),
            Channels::Spatial(_) => acceleration_profile(t),
        })
        .collect()
}

fn by_condition(samples: Vec<FunctionalSample>) -> BTreeMap<String, Vec<FunctionalSample>> {
    let mut m: BTreeMap<String, Vec<FunctionalSample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.condition.clone()).or_default().push(s);
    }
    m
}

/// File stems per condition; distinct conditions must not collide.
fn stems<'a>(conditions: impl Iterator<Item = &'a String>) -> Result<BTreeMap<String, String>> {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for c in conditions {
        let s = sanitize(c);
        if let Some(other) = seen.insert(s.clone(), c.clone()) {
            return Err(Error::Config(format!(
                "conditions '{other}' and '{c}' map to the same file name '{s}'"
            )));
        }
        out.insert(c.clone(), s);
    }
    Ok(out)
}

fn fit_conditions(
    cfg: &RunConfig,
    groups: &BTreeMap<String, Vec<FunctionalSample>>,
    mode: TimeMode,
) -> Result<Vec<(String, FittedModel)>> {
    let spec = cfg.model.to_spec()?;
    let jobs: Vec<(&String, &Vec<FunctionalSample>)> = groups.iter().collect();
    jobs.into_par_iter()
        .map(|(c, samples)| {
            log::info!("fitting condition {c} ({} curves)", samples.len());
            let data = normalize(samples, mode).map_err(|e| e.context(format!("condition {c}")))?;
            let model = fit(&data, &spec).map_err(|e| e.context(format!("condition {c}")))?;
            Ok((c.clone(), model))
        })
        .collect()
}

fn run_fit(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let groups = by_condition(functional(&load(cfg, &cfg.input)?)?);
    let names = stems(groups.keys())?;
    let models = fit_conditions(cfg, &groups, cfg.time_mode)?;
    let mut outer = Vec::new();
    let mut inner = Vec::new();
    let mut summary = Vec::new();
    for (c, m) in &models {
        let file = format!("model_{}.json", names[c]);
        let mut w = stage.create(&file)?;
        std::io::Write::write_all(&mut w, m.to_json()?.as_bytes())?;
        std::io::Write::flush(&mut w)?;
        for s in &m.trace.outer {
            let p = &s.params;
            outer.push(vec![
                c.clone(),
                s.outer.to_string(),
                num(s.nll_at_start),
                num(s.nll),
                s.accepted.to_string(),
                num(p.sigma2),
                num(p.gamma2),
                num(p.tau2),
                num(p.alpha),
                num(p.mu),
            ]);
        }
        for s in &m.trace.inner {
            inner.push(vec![
                c.clone(),
                s.outer.to_string(),
                s.inner.to_string(),
                num(s.posterior_before),
                num(s.posterior_after_warps),
                num(s.posterior_after_templates),
                num(s.max_warp_change),
            ]);
        }
        summary.push(json!({
            "condition": c,
            "model": file,
            "participants": m.participants.len(),
            "curves": m.repetitions.iter().map(Vec::len).sum::<usize>(),
            "nll": m.nll,
            "params": m.params,
        }));
    }
    stage.write_rows(
        "nll_trace.csv",
        &["condition", "outer", "nll_at_start", "nll", "accepted", "sigma2", "gamma2", "tau2", "alpha", "mu"],
        &outer,
    )?;
    stage.write_rows(
        "posterior_trace.csv",
        &[
            "condition",
            "outer",
            "inner",
            "posterior_before",
            "posterior_after_warps",
            "posterior_after_templates",
            "max_warp_change",
        ],
        &inner,
    )?;
    stage.write_json("summary.json", &json!({ "time_mode": cfg.time_mode, "conditions": summary }))
}

fn load_models(paths: &[PathBuf]) -> Result<BTreeMap<String, FittedModel>> {
    let mut out = BTreeMap::new();
    for p in paths {
        let text = std::fs::read_to_string(p)?;
        let m = FittedModel::from_json(&text).map_err(|e| e.context(p.display().to_string()))?;
        let [c] = m.conditions.clone().try_into().map_err(|v: Vec<String>| {
            Error::Validation(format!("{}: model covers {} conditions, expected one", p.display(), v.len()))
        })?;
        if out.insert(c.clone(), m).is_some() {
            return Err(Error::Config(format!("two models given for condition '{c}'")));
        }
    }
    Ok(out)
}

/// Index of the curve `(participant, repetition)` in `model`.
fn curve_index(model: &FittedModel, s: &FunctionalSample) -> Result<(usize, usize)> {
    let missing = || {
        Error::Validation(format!(
            "condition {} participant {} repetition {} is not part of the model",
            s.condition, s.participant, s.repetition
        ))
    };
    let i = model.participant_index(&s.participant).ok_or_else(missing)?;
    let j = model.repetitions[i].iter().position(|&r| r == s.repetition).ok_or_else(missing)?;
    Ok((i, j))
}

/// Samples of one condition normalized the way `model` was fitted.
fn model_dataset(model: &FittedModel, samples: &[FunctionalSample]) -> Result<Vec<FunctionalSample>> {
    let norm = model
        .normalization
        .ok_or_else(|| Error::Validation("model lacks its data normalization".into()))?;
    norm.apply(samples)
}

fn run_align(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let groups = by_condition(functional(&load(cfg, &cfg.input)?)?);
    stems(groups.keys())?;
    let models: Vec<(String, FittedModel)> = if cfg.align.models.is_empty() {
        fit_conditions(cfg, &groups, cfg.time_mode)?
    } else {
        let mut loaded = load_models(&cfg.align.models)?;
        groups
            .keys()
            .map(|c| {
                loaded
                    .remove(c)
                    .map(|m| (c.clone(), m))
                    .ok_or_else(|| Error::Config(format!("no model given for condition '{c}'")))
            })
            .collect::<Result<_>>()?
    };
    let n = cfg.align.grid_points;
    let grid: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let mut aligned = Vec::new();
    let mut warps = Vec::new();
    let mut templates = Vec::new();
    for (c, model) in &models {
        let cfgw = &model.spec.warp;
        for s in model_dataset(model, &groups[c])? {
            let (i, j) = curve_index(model, &s)?;
            let (fixed, rand) = (&model.warps.fixed[i], &model.warps.random[i][j]);
            let u = eval_warp(cfgw, fixed, Some(rand), &s.times)?;
            let fitted = model.curve_mean(i, j, &s.times)?;
            for k in 0..s.len() {
                aligned.push(vec![
                    c.clone(),
                    s.participant.clone(),
                    s.repetition.to_string(),
                    num(s.times[k]),
                    num(u[k]),
                    num(s.values[k]),
                    num(fitted[k]),
                ]);
            }
            let g = eval_warp(cfgw, fixed, Some(rand), &grid)?;
            for (t, v) in grid.iter().zip(&g) {
                warps.push(vec![c.clone(), s.participant.clone(), s.repetition.to_string(), num(*t), num(*v)]);
            }
        }
        for (t, v) in grid.iter().zip(model.template(&grid)?) {
            templates.push(vec![c.clone(), "shared".into(), String::new(), num(*t), num(v)]);
        }
        for (i, p) in model.participants.iter().enumerate() {
            let coef = model.templates.coef(i);
            for &t in &grid {
                let v = model.spec.basis.eval_spline(&coef, t)?.0;
                templates.push(vec![c.clone(), "participant".into(), p.clone(), num(t), num(v)]);
            }
        }
    }
    stage.write_rows(
        "aligned.csv",
        &["condition", "participant", "repetition", "time", "aligned_time", "value", "fitted"],
        &aligned,
    )?;
    stage.write_rows("warps.csv", &["condition", "participant", "repetition", "time", "warp"], &warps)?;
    stage.write_rows("templates.csv", &["condition", "level", "participant", "time", "value"], &templates)
}

#[derive(Serialize)]
struct ConditionAccuracy {
    condition: String,
    curves: usize,
    accuracy: f64,
}

fn run_classify(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let train = by_condition(functional(&load(cfg, &cfg.input)?)?);
    let test = by_condition(functional(&load(cfg, &cfg.classify.test)?)?);
    for c in test.keys() {
        if !train.contains_key(c) {
            return Err(Error::InsufficientData(format!("no training curves for condition '{c}'")));
        }
    }
    let jobs: Vec<(&String, &Vec<FunctionalSample>)> = test.iter().collect();
    let results = jobs
        .into_par_iter()
        .map(|(c, samples)| {
            let ctx = |e: Error| e.context(format!("condition {c}"));
            let data = normalize(&train[c], cfg.time_mode).map_err(ctx)?;
            let test = data.normalization.apply(samples).map_err(ctx)?;
            let trained = cfg.classify.method.train_method(&data).map_err(ctx)?;
            Ok((c.clone(), classify(&trained, &test).map_err(ctx)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut confusion = Vec::new();
    let mut per = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (c, res) in &results {
        for p in &res.predictions {
            let ok = p.predicted == p.participant;
            hits += ok as usize;
            rows.push(vec![
                c.clone(),
                p.participant.clone(),
                p.repetition.to_string(),
                p.predicted.clone(),
                ok.to_string(),
            ]);
        }
        total += res.predictions.len();
        for (truth, preds) in res.confusion() {
            for (pred, count) in preds {
                confusion.push(vec![c.clone(), truth.clone(), pred, count.to_string()]);
            }
        }
        per.push(ConditionAccuracy {
            condition: c.clone(),
            curves: res.predictions.len(),
            accuracy: res.accuracy,
        });
    }
    stage.write_rows(
        "predictions.csv",
        &["condition", "participant", "repetition", "predicted", "correct"],
        &rows,
    )?;
    stage.write_rows("confusion.csv", &["condition", "participant", "predicted", "count"], &confusion)?;
    stage.write_json(
        "summary.json",
        &json!({
            "method": cfg.classify.method,
            "time_mode": cfg.time_mode,
            "accuracy": if total > 0 { hits as f64 / total as f64 } else { 0.0 },
            "conditions": per,
        }),
    )
}

fn run_cv(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let groups = by_condition(functional(&load(cfg, &cfg.input)?)?);
    let plan = CvPlan { folds: cfg.cv.folds };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (c, samples) in &groups {
        let ctx = |e: Error| e.context(format!("condition {c}"));
        let data: ConditionDataset = normalize(samples, cfg.time_mode).map_err(ctx)?;
        let res = cross_validate::<Method>(&data, &cfg.cv.grid, plan).map_err(ctx)?;
        for r in &res.rows {
            rows.push(vec![
                c.clone(),
                r.method.clone(),
                r.param_json.clone(),
                r.fold.to_string(),
                num(r.accuracy),
            ]);
        }
        summary.push(json!({
            "condition": c,
            "best": res.best,
            "best_method": cfg.cv.grid[res.best],
            "best_accuracy": res.best_accuracy,
            "mean_accuracy": res.mean_accuracy,
        }));
    }
    stage.write_rows("cv.csv", &["condition", "method", "params", "fold", "accuracy"], &rows)?;
    stage.write_json(
        "summary.json",
        &json!({ "time_mode": cfg.time_mode, "folds": cfg.cv.folds, "conditions": summary }),
    )
}

/// Splits `<analysis><separator><label>` into the analysis and the height index.
fn split_condition(cfg: &RunConfig, condition: &str) -> Result<(String, usize)> {
    let f = &cfg.factor;
    let (analysis, label) = condition.rsplit_once(f.separator.as_str()).ok_or_else(|| {
        Error::Validation(format!(
            "condition '{condition}' lacks the height separator '{}'",
            f.separator
        ))
    })?;
    let h = f.height_labels.iter().position(|l| l == label).ok_or_else(|| {
        Error::Validation(format!("condition '{condition}' has unknown height label '{label}'"))
    })?;
    Ok((analysis.to_string(), h))
}

fn design(cfg: &RunConfig, kind: DesignKind) -> FactorDesign {
    match kind {
        DesignKind::Anova => FactorDesign::anova(cfg.factor.height_labels.len()),
        DesignKind::Regression => FactorDesign::regression(&cfg.factor.height_values),
    }
}

fn run_factor(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let f = &cfg.factor;
    let trajs = load(cfg, &cfg.input)?;
    let mut by_cond: BTreeMap<String, Vec<RawTrajectory>> = BTreeMap::new();
    for t in trajs {
        t.coords()?;
        by_cond.entry(t.condition.clone()).or_default().push(t);
    }
    let names = stems(by_cond.keys())?;
    let heights: BTreeMap<String, (String, usize)> = by_cond
        .keys()
        .map(|c| Ok((c.clone(), split_condition(cfg, c)?)))
        .collect::<Result<_>>()?;

    // Warps are estimated on acceleration profiles in percentual time.
    let profiles: BTreeMap<String, Vec<FunctionalSample>> = by_cond
        .iter()
        .map(|(c, ts)| Ok((c.clone(), functional(ts)?)))
        .collect::<Result<_>>()?;
    let mut loaded = load_models(&f.models)?;
    let models: Vec<(String, FittedModel)> = if f.models.is_empty() {
        fit_conditions(cfg, &profiles, TimeMode::Percentual)?
    } else {
        by_cond
            .keys()
            .map(|c| {
                loaded
                    .remove(c)
                    .map(|m| (c.clone(), m))
                    .ok_or_else(|| Error::Config(format!("no warp model given for condition '{c}'")))
            })
            .collect::<Result<_>>()?
    };

    let mut analyses: BTreeMap<String, Vec<PathObservation>> = BTreeMap::new();
    let mut path_rows = Vec::new();
    for (c, model) in &models {
        if f.models.is_empty() {
            stage.write_json(&format!("warp_{}.json", names[c]), model)?;
        }
        let (analysis, h) = &heights[c];
        for (traj, s) in by_cond[c].iter().zip(&profiles[c]) {
            let (i, j) = curve_index(model, s)?;
            let warp = AlignmentWarp {
                config: model.spec.warp.clone(),
                values: combined_values(&model.warps.fixed[i], Some(&model.warps.random[i][j])),
            };
            let path = resample_path(traj, &warp)?;
            for k in 0..path.nrows() {
                path_rows.push(vec![
                    analysis.clone(),
                    f.height_labels[*h].clone(),
                    traj.participant.clone(),
                    traj.repetition.to_string(),
                    k.to_string(),
                    num(path[(k, 0)]),
                    num(path[(k, 1)]),
                    num(path[(k, 2)]),
                ]);
            }
            analyses.entry(analysis.clone()).or_default().push(PathObservation {
                participant: traj.participant.clone(),
                repetition: traj.repetition,
                height: *h,
                path,
            });
        }
    }

    let settings = EcmSettings {
        max_sweeps: f.max_sweeps,
        ..EcmSettings::default()
    };
    let scree_q = if f.scree_q.is_empty() { vec![f.q] } else { f.scree_q.clone() };
    let mut scree = Vec::new();
    let mut variance = Vec::new();
    let mut lrt_rows = Vec::new();
    let mut mean_rows = Vec::new();
    let mut ellipsoids = BTreeMap::new();
    let analysis_stems = stems(analyses.keys())?;
    for (a, obs) in analyses {
        let ctx = |e: Error| e.context(format!("analysis {a}"));
        let used: Vec<usize> = {
            let mut u: Vec<usize> = obs.iter().map(|o| o.height).collect();
            u.sort_unstable();
            u.dedup();
            u
        };
        let data = FactorData::new(obs).map_err(ctx)?;
        let fit_q = |q: usize, kind: DesignKind| fit_factor(&data, q, &design(cfg, kind), &settings).map_err(ctx);
        let model = fit_q(f.q, f.design)?;
        log::info!("analysis {a}: log-likelihood {:.6} after {} sweeps", model.loglik, model.sweeps);
        stage.write_json(&format!("factor_{}.json", analysis_stems[&a]), &model)?;
        if f.lrt {
            let other = match f.design {
                DesignKind::Anova => DesignKind::Regression,
                DesignKind::Regression => DesignKind::Anova,
            };
            let alt = fit_q(f.q, other)?;
            let (anova, regression) = match f.design {
                DesignKind::Anova => (&model, &alt),
                DesignKind::Regression => (&alt, &model),
            };
            let t = lrt_linear_height(anova, regression).map_err(ctx)?;
            lrt_rows.push(vec![
                a.clone(),
                num(anova.loglik),
                num(regression.loglik),
                num(t.statistic),
                t.df.to_string(),
                num(t.p_value),
            ]);
        }
        for &q in &scree_q {
            let m = if q == f.q { model.clone() } else { fit_q(q, f.design)? };
            for (k, s) in m.loading_shares().iter().enumerate() {
                scree.push(vec![a.clone(), q.to_string(), (k + 1).to_string(), num(*s)]);
            }
        }
        let shares = variance_decomposition(&model);
        for (l, name) in LEVEL_NAMES.iter().enumerate() {
            variance.push(vec![a.clone(), name.to_string(), num(shares.levels[l])]);
        }
        variance.push(vec![a.clone(), "noise".into(), num(shares.noise)]);
        let mut records = Vec::new();
        for &h in &used {
            let mean = model.mean_path(h)?;
            for k in 0..mean.nrows() {
                mean_rows.push(vec![
                    a.clone(),
                    f.height_labels[h].clone(),
                    k.to_string(),
                    num(mean[(k, 0)]),
                    num(mean[(k, 1)]),
                    num(mean[(k, 2)]),
                ]);
            }
            records.extend(path_ellipsoids(&model, h, f.ellipsoid_points, f.ellipsoid_level).map_err(ctx)?);
        }
        ellipsoids.insert(a.clone(), records);
    }
    stage.write_rows(
        "paths.csv",
        &["analysis", "height", "participant", "repetition", "time_step", "x", "y", "z"],
        &path_rows,
    )?;
    stage.write_rows("mean_paths.csv", &["analysis", "height", "time_step", "x", "y", "z"], &mean_rows)?;
    stage.write_rows("scree.csv", &["analysis", "q", "loading_index", "share"], &scree)?;
    stage.write_rows("variance.csv", &["analysis", "level", "share"], &variance)?;
    if f.lrt {
        stage.write_rows(
            "lrt.csv",
            &["analysis", "loglik_anova", "loglik_regression", "statistic", "df", "p_value"],
            &lrt_rows,
        )?;
    }
    stage.write_json(
        "ellipsoids.json",
        &json!({ "level": f.ellipsoid_level, "height_labels": f.height_labels, "analyses": ellipsoids }),
    )
}

fn run_simulate(cfg: &RunConfig, stage: &Stage) -> Result<()> {
    let s = &cfg.simulate;
    let truth = Truth::reference_scenario(s.participants, s.truth_seed)?;
    let design = SimDesign::equidistant(s.repetitions, s.grid_points, cfg.seed);
    match s.mode {
        SimulateMode::Recovery => {
            let config = RecoveryConfig {
                n_sim: s.n_sim,
                seed: cfg.seed,
                spec: s.fit.to_spec()?,
                quadrature_points: s.quadrature_points,
            };
            let report = recovery_study(&truth, &design, &config)?;
            report.write_csv(stage.create("replicates.csv")?)?;
            let mut w = stage.create("summary.json")?;
            std::io::Write::write_all(&mut w, report.summary_json()?.as_bytes())?;
            std::io::Write::flush(&mut w)?;
        }
        SimulateMode::Dataset => {
            let sim = simulate_dataset(&truth, &design)?;
            let samples: Vec<FunctionalSample> = sim.dataset.samples().cloned().collect();
            write_samples_csv(stage.create("dataset.csv")?, &samples)?;
            stage.write_json("truth.json", &truth)?;
            stage.write_json("warps.json", &sim.warps)?;
        }
    }
    stage.write_json("config.json", &json!({ "seed": cfg.seed, "simulate": s }))
}
