//! Cross-fitting and the DML / R-learner estimators.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::effects::normal_quantile;
use crate::error::{GkrlsError, Result};
use crate::family::Family;
use crate::model::{fit_model, FitOptions, FittedModel};
use crate::rng::{derive_seed, seeded};
use crate::solver::Scale;
use crate::spec::{KernelTerm, ModelSpec, SketchOptions, TermSpec};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_TRIM: (f64, f64) = (0.01, 0.99);
/// Rows with `|W − ê|` below this are dropped from the R-learner's second stage.
pub const MIN_TREATMENT_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub stratified_by: Option<String>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

/// Random fold assignment; with `groups`, whole groups go to one fold,
/// greedily filling the currently smallest fold.
pub fn make_folds_n(n: usize, k: usize, groups: Option<&[usize]>, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(GkrlsError::InvalidArgument("at least two folds are required".into()));
    }
    if n < 2 * k {
        return Err(GkrlsError::InvalidArgument(format!("{n} rows are too few for {k} folds")));
    }
    let mut rng = seeded(seed);
    let mut assignment = vec![0; n];
    match groups {
        None => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for (pos, &row) in perm.iter().enumerate() {
                assignment[row] = pos % k;
            }
        }
        Some(g) => {
            if g.len() != n {
                return Err(GkrlsError::Dimension("group codes length".into()));
            }
            let ng = g.iter().copied().max().map_or(0, |m| m + 1);
            let mut members: Vec<Vec<usize>> = vec![vec![]; ng];
            for (i, &c) in g.iter().enumerate() {
                members[c].push(i);
            }
            let mut ids: Vec<usize> = (0..ng).filter(|&c| !members[c].is_empty()).collect();
            if ids.len() < k {
                return Err(GkrlsError::InvalidArgument(format!(
                    "{} clusters cannot fill {k} folds",
                    ids.len()
                )));
            }
            ids.shuffle(&mut rng);
            let mut size = vec![0usize; k];
            for (pos, &c) in ids.iter().enumerate() {
                // first k clusters seed the folds so none stays empty
                let f = if pos < k {
                    pos
                } else {
                    (0..k).min_by_key(|&f| (size[f], f)).expect("k ≥ 2")
                };
                size[f] += members[c].len();
                for &i in &members[c] {
                    assignment[i] = f;
                }
            }
        }
    }
    Ok(FoldPlan {
        k,
        assignment,
        stratified_by: None,
        seed,
    })
}

/// Fold plan for a data set, optionally stratified by a categorical column.
pub fn make_folds(data: &Dataset, k: usize, stratify_by: Option<&str>, seed: u64) -> Result<FoldPlan> {
    match stratify_by {
        None => make_folds_n(data.n(), k, None, seed),
        Some(col) => {
            let f = data
                .factor(col)
                .ok_or_else(|| GkrlsError::Data(format!("stratification column '{col}' is not categorical")))?;
            let mut plan = make_folds_n(data.n(), k, Some(&f.codes), seed)?;
            plan.stratified_by = Some(col.to_string());
            Ok(plan)
        }
    }
}

/// Out-of-fold predictions plus per-fold bookkeeping.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub predictions: Vec<f64>,
    pub per_fold_deviance: Vec<f64>,
    /// Training rows of each fold model.
    pub trained_on: Vec<Vec<usize>>,
    /// Which fold model produced each row's prediction.
    pub predicted_by: Vec<usize>,
    pub models: Vec<FittedModel>,
}

/// Fails if any row was predicted by a model whose training rows include it.
pub fn check_fold_hygiene(cf: &CrossFit) -> Result<()> {
    let n = cf.predicted_by.len();
    let mut seen = vec![false; n];
    for (f, rows) in cf.trained_on.iter().enumerate() {
        for s in seen.iter_mut() {
            *s = false;
        }
        for &r in rows {
            seen[r] = true;
        }
        for i in 0..n {
            if cf.predicted_by[i] == f && seen[i] {
                return Err(GkrlsError::FoldFit {
                    fold: f,
                    source: Box::new(GkrlsError::Data(format!("row {} predicted by a model trained on it", i + 1))),
                });
            }
        }
    }
    Ok(())
}

fn fold_options(opts: &FitOptions, fold: usize) -> FitOptions {
    FitOptions {
        seed: derive_seed(opts.seed, fold as u64),
        ..opts.clone()
    }
}

/// Fit on each fold's complement (rows filtered by `keep`) and predict the fold.
fn crossfit_rows(
    data: &Dataset,
    spec: &ModelSpec,
    opts: &FitOptions,
    plan: &FoldPlan,
    keep: &(dyn Fn(usize) -> bool + Sync),
) -> Result<CrossFit> {
    if plan.n() != data.n() {
        return Err(GkrlsError::Dimension("fold plan length differs from data rows".into()));
    }
    let per_fold: Vec<(Vec<usize>, Vec<usize>, Vec<f64>, FittedModel)> = (0..plan.k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = plan.train_rows(f).into_iter().filter(|&i| keep(i)).collect();
            let test = plan.test_rows(f);
            let wrap = |e: GkrlsError| GkrlsError::FoldFit {
                fold: f,
                source: Box::new(e),
            };
            let m = fit_model(&data.subset(&train), spec, &fold_options(opts, f)).map_err(wrap)?;
            let pred = m.predict(&data.subset(&test), Scale::Response).map_err(wrap)?;
            Ok((train, test, pred, m.without_training()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = vec![f64::NAN; data.n()];
    let mut predicted_by = vec![usize::MAX; data.n()];
    let mut trained_on = Vec::new();
    let mut models = Vec::new();
    let mut per_fold_deviance = Vec::new();
    for (f, (train, test, pred, m)) in per_fold.into_iter().enumerate() {
        for (&r, &p) in test.iter().zip(&pred) {
            predictions[r] = p;
            predicted_by[r] = f;
        }
        per_fold_deviance.push(m.diagnostics.deviance);
        trained_on.push(train);
        models.push(m);
    }
    let cf = CrossFit {
        predictions,
        per_fold_deviance,
        trained_on,
        predicted_by,
        models,
    };
    check_fold_hygiene(&cf)?;
    Ok(cf)
}

/// Out-of-fold predictions of `spec` (response scale).
pub fn crossfit_nuisance(data: &Dataset, spec: &ModelSpec, opts: &FitOptions, plan: &FoldPlan) -> Result<CrossFit> {
    crossfit_rows(data, spec, opts, plan, &|_| true)
}

/// All covariates linear plus one kernel over all of them, without `exclude`.
pub fn default_nuisance_spec(data: &Dataset, outcome: &str, exclude: &[&str]) -> Result<ModelSpec> {
    let mut vars: Vec<String> = Vec::new();
    let mut covered: Vec<String> = Vec::new();
    for e in data.expansions() {
        covered.extend(e.columns.iter().cloned());
        if !exclude.contains(&e.source.as_str()) && e.source != outcome {
            vars.push(e.source.clone());
        }
    }
    for n in data.names() {
        if !covered.contains(n) && !exclude.contains(&n.as_str()) && n != outcome {
            vars.push(n.clone());
        }
    }
    if vars.is_empty() {
        return Err(GkrlsError::Spec("no covariates left for the nuisance model".into()));
    }
    Ok(ModelSpec {
        outcome: outcome.to_string(),
        intercept: true,
        terms: vec![
            TermSpec::Fixed { vars: vars.clone() },
            TermSpec::Kernel(KernelTerm {
                vars,
                sketch: SketchOptions::default(),
                bandwidth: None,
                standardize: None,
            }),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub method: String,
    pub theta: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub n: usize,
    pub folds: usize,
    pub trimmed_n: usize,
    pub excluded_n: usize,
    pub n_clusters: Option<usize>,
    pub per_fold_deviance: Vec<f64>,
    pub tau_cv: Option<Vec<f64>>,
    pub tau_full: Option<Vec<f64>>,
    pub fold_hygiene_checked: bool,
}

fn ci95(theta: f64, se: f64) -> (f64, f64) {
    let z = normal_quantile(0.975);
    (theta - z * se, theta + z * se)
}

/// `sqrt(Σ_g (Σ_{i∈g} ψ_i)²)` or `sqrt(Σ ψ_i²)` without clusters.
fn aggregate_sd(psi: &[f64], clusters: Option<&[usize]>) -> (f64, Option<usize>) {
    match clusters {
        None => (psi.iter().map(|v| v * v).sum::<f64>().sqrt(), None),
        Some(c) => {
            let g = c.iter().copied().max().map_or(0, |m| m + 1);
            let mut sums = vec![0.0; g];
            let mut present = vec![false; g];
            for (i, &ci) in c.iter().enumerate() {
                sums[ci] += psi[i];
                present[ci] = true;
            }
            (
                sums.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Some(present.iter().filter(|&&b| b).count()),
            )
        }
    }
}

/// Partialling-out estimator from nuisance predictions.
pub fn dml_plr_from_nuisance(
    y: &[f64],
    w: &[f64],
    m_hat: &[f64],
    e_hat: &[f64],
    clusters: Option<&[usize]>,
) -> Result<CausalEstimate> {
    let n = y.len();
    if [w.len(), m_hat.len(), e_hat.len()].iter().any(|&l| l != n) {
        return Err(GkrlsError::Dimension("nuisance vectors differ in length".into()));
    }
    let yt: Vec<f64> = (0..n).map(|i| y[i] - m_hat[i]).collect();
    let vt: Vec<f64> = (0..n).map(|i| w[i] - e_hat[i]).collect();
    let svv: f64 = vt.iter().map(|v| v * v).sum();
    let wscale: f64 = w.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    if svv <= 1e-12 * wscale {
        return Err(GkrlsError::Data("treatment residuals are degenerate".into()));
    }
    let theta = vt.iter().zip(&yt).map(|(a, b)| a * b).sum::<f64>() / svv;
    let psi: Vec<f64> = (0..n).map(|i| (yt[i] - theta * vt[i]) * vt[i]).collect();
    let (agg, g) = aggregate_sd(&psi, clusters);
    let se = agg / svv;
    Ok(CausalEstimate {
        method: "dml_plr".into(),
        theta,
        se,
        ci: ci95(theta, se),
        n,
        folds: 0,
        trimmed_n: 0,
        excluded_n: 0,
        n_clusters: g,
        per_fold_deviance: vec![],
        tau_cv: None,
        tau_full: None,
        fold_hygiene_checked: false,
    })
}

/// Clamp propensities into `[lo, hi]`, returning the clamped count.
pub fn trim_propensity(e: &mut [f64], trim: (f64, f64)) -> usize {
    let mut count = 0;
    for v in e.iter_mut() {
        let c = v.clamp(trim.0, trim.1);
        if c != *v {
            count += 1;
        }
        *v = c;
    }
    count
}

fn check_trim(trim: (f64, f64)) -> Result<()> {
    if !(trim.0 > 0.0 && trim.0 < trim.1 && trim.1 < 1.0) {
        return Err(GkrlsError::InvalidArgument(format!("trim bounds {trim:?}")));
    }
    Ok(())
}

/// AIPW estimator from nuisance predictions; propensities are clamped to `trim`.
pub fn dml_ate_from_nuisance(
    y: &[f64],
    w: &[f64],
    m0: &[f64],
    m1: &[f64],
    e_hat: &[f64],
    trim: (f64, f64),
    clusters: Option<&[usize]>,
) -> Result<CausalEstimate> {
    check_trim(trim)?;
    let n = y.len();
    if [w.len(), m0.len(), m1.len(), e_hat.len()].iter().any(|&l| l != n) {
        return Err(GkrlsError::Dimension("nuisance vectors differ in length".into()));
    }
    check_binary(w)?;
    let mut e = e_hat.to_vec();
    let trimmed = trim_propensity(&mut e, trim);
    let score: Vec<f64> = (0..n)
        .map(|i| m1[i] - m0[i] + w[i] * (y[i] - m1[i]) / e[i] - (1.0 - w[i]) * (y[i] - m0[i]) / (1.0 - e[i]))
        .collect();
    let theta = score.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = score.iter().map(|s| s - theta).collect();
    let (agg, g) = aggregate_sd(&centered, clusters);
    let se = agg / n as f64;
    Ok(CausalEstimate {
        method: "dml_ate".into(),
        theta,
        se,
        ci: ci95(theta, se),
        n,
        folds: 0,
        trimmed_n: trimmed,
        excluded_n: 0,
        n_clusters: g,
        per_fold_deviance: vec![],
        tau_cv: None,
        tau_full: None,
        fold_hygiene_checked: false,
    })
}

fn check_binary(w: &[f64]) -> Result<()> {
    if let Some(i) = w.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(GkrlsError::Data(format!("treatment must be 0/1; row {} has {}", i + 1, w[i])));
    }
    if !w.contains(&0.0) || !w.contains(&1.0) {
        return Err(GkrlsError::Data("treatment has a single value".into()));
    }
    Ok(())
}

fn treatment_values(data: &Dataset, treatment: &str) -> Result<Vec<f64>> {
    let w = data
        .column(treatment)
        .ok_or_else(|| GkrlsError::Data(format!("treatment column '{treatment}' not found")))?
        .to_vec();
    let first = w[0];
    if w.iter().all(|&v| v == first) {
        return Err(GkrlsError::Data(format!("treatment '{treatment}' is constant")));
    }
    Ok(w)
}

fn spec_mentions(spec: &ModelSpec, var: &str) -> bool {
    spec.terms.iter().any(|t| match t {
        TermSpec::Fixed { vars } => vars.iter().any(|v| v == var),
        TermSpec::Kernel(k) => k.vars.iter().any(|v| v == var),
        TermSpec::RandomIntercept { group } => group == var,
    })
}

fn cluster_codes<'a>(data: &'a Dataset, plan: &FoldPlan) -> Option<&'a [usize]> {
    plan.stratified_by
        .as_deref()
        .and_then(|c| data.factor(c))
        .map(|f| f.codes.as_slice())
}

/// DML partially linear model: residual-on-residual with cross-fitted
/// gaussian nuisances for the outcome and the treatment.
pub fn dml_plr(
    data: &Dataset,
    treatment: &str,
    spec: &ModelSpec,
    plan: &FoldPlan,
    opts: &FitOptions,
) -> Result<CausalEstimate> {
    let w = treatment_values(data, treatment)?;
    if spec_mentions(spec, treatment) {
        return Err(GkrlsError::Spec(format!("nuisance spec must not include the treatment '{treatment}'")));
    }
    let gauss = FitOptions {
        family: Family::Gaussian,
        ..opts.clone()
    };
    let m = crossfit_nuisance(data, &spec.with_outcome(data.outcome_name()), &gauss, plan)?;
    let e = crossfit_nuisance(&data.with_outcome(treatment, w.clone())?, &spec.with_outcome(treatment), &gauss, plan)?;
    let mut est = dml_plr_from_nuisance(data.outcome(), &w, &m.predictions, &e.predictions, cluster_codes(data, plan))?;
    est.folds = plan.k;
    est.per_fold_deviance = m.per_fold_deviance;
    est.fold_hygiene_checked = true;
    Ok(est)
}

/// DML average treatment effect (AIPW) with per-arm outcome models and a
/// binomial propensity model.
pub fn dml_ate(
    data: &Dataset,
    treatment: &str,
    spec: &ModelSpec,
    plan: &FoldPlan,
    trim: (f64, f64),
    opts: &FitOptions,
) -> Result<CausalEstimate> {
    check_trim(trim)?;
    let w = treatment_values(data, treatment)?;
    check_binary(&w)?;
    if spec_mentions(spec, treatment) {
        return Err(GkrlsError::Spec(format!("nuisance spec must not include the treatment '{treatment}'")));
    }
    for f in 0..plan.k {
        let train = plan.train_rows(f);
        let treated = train.iter().filter(|&&i| w[i] == 1.0).count();
        if treated == 0 || treated == train.len() {
            return Err(GkrlsError::FoldFit {
                fold: f,
                source: Box::new(GkrlsError::Data("training rows are all treated or all control".into())),
            });
        }
    }
    let gauss = FitOptions {
        family: opts.family,
        ..opts.clone()
    };
    let outcome_spec = spec.with_outcome(data.outcome_name());
    let w1 = w.clone();
    let m1 = crossfit_rows(data, &outcome_spec, &gauss, plan, &move |i| w1[i] == 1.0)?;
    let w0 = w.clone();
    let m0 = crossfit_rows(data, &outcome_spec, &gauss, plan, &move |i| w0[i] == 0.0)?;
    let binom = FitOptions {
        family: Family::BinomialLogit,
        ..opts.clone()
    };
    let e = crossfit_nuisance(&data.with_outcome(treatment, w.clone())?, &spec.with_outcome(treatment), &binom, plan)?;
    let mut est = dml_ate_from_nuisance(
        data.outcome(),
        &w,
        &m0.predictions,
        &m1.predictions,
        &e.predictions,
        trim,
        cluster_codes(data, plan),
    )?;
    est.folds = plan.k;
    est.per_fold_deviance = m1
        .per_fold_deviance
        .iter()
        .zip(&m0.per_fold_deviance)
        .map(|(a, b)| a + b)
        .collect();
    est.fold_hygiene_checked = true;
    Ok(est)
}

pub const PSEUDO_OUTCOME: &str = "pseudo_outcome";

/// Second stage of the R-learner from nuisance predictions.
///
/// Rows with `|W − ê| < 1e-6` are excluded from every τ fit (and counted);
/// all rows still receive predictions.
#[allow(clippy::too_many_arguments)]
pub fn rlearner_from_nuisance(
    data: &Dataset,
    w: &[f64],
    m_hat: &[f64],
    e_hat: &[f64],
    spec_tau: &ModelSpec,
    plan: &FoldPlan,
    opts: &FitOptions,
) -> Result<CausalEstimate> {
    let n = data.n();
    let y = data.outcome();
    let resid: Vec<f64> = (0..n).map(|i| w[i] - e_hat[i]).collect();
    let keep: Vec<bool> = resid.iter().map(|r| r.abs() >= MIN_TREATMENT_RESIDUAL).collect();
    let excluded = keep.iter().filter(|&&k| !k).count();
    let pseudo: Vec<f64> = (0..n)
        .map(|i| if keep[i] { (y[i] - m_hat[i]) / resid[i] } else { 0.0 })
        .collect();
    let weights: Vec<f64> = (0..n).map(|i| if keep[i] { resid[i] * resid[i] } else { 1.0 }).collect();
    let tau_data = data.with_outcome(PSEUDO_OUTCOME, pseudo)?.with_weights(weights)?;
    let tau_spec = spec_tau.with_outcome(PSEUDO_OUTCOME);
    let gauss = FitOptions {
        family: Family::Gaussian,
        ..opts.clone()
    };
    let keep_ref = keep.clone();
    let cv = crossfit_rows(&tau_data, &tau_spec, &gauss, plan, &move |i| keep_ref[i])?;
    let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let full = fit_model(&tau_data.subset(&kept), &tau_spec, &gauss)?;
    let rows = full.design_rows(&tau_data)?;
    let tau_full = full.predict_rows(rows.as_ref(), Scale::Response)?;
    let theta = cv.predictions.iter().sum::<f64>() / n as f64;
    // delta method for the mean full-sample prediction
    let k = full.coef.len();
    let g: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| rows[(i, j)]).sum::<f64>() / n as f64)
        .collect();
    let se = full.variance.quad_form(&g).max(0.0).sqrt();
    Ok(CausalEstimate {
        method: "rlearner".into(),
        theta,
        se,
        ci: ci95(theta, se),
        n,
        folds: plan.k,
        trimmed_n: 0,
        excluded_n: excluded,
        n_clusters: None,
        per_fold_deviance: cv.per_fold_deviance,
        tau_cv: Some(cv.predictions),
        tau_full: Some(tau_full),
        fold_hygiene_checked: true,
    })
}

/// R-learner: cross-fitted `m̂`, `ê` (trimmed), then a weighted fit of the
/// pseudo-outcome `(y − m̂)/(W − ê)` with weights `(W − ê)²`.
pub fn rlearner(
    data: &Dataset,
    treatment: &str,
    spec_nuisance: &ModelSpec,
    spec_tau: &ModelSpec,
    plan: &FoldPlan,
    trim: (f64, f64),
    opts: &FitOptions,
) -> Result<CausalEstimate> {
    check_trim(trim)?;
    let w = treatment_values(data, treatment)?;
    check_binary(&w)?;
    if spec_mentions(spec_nuisance, treatment) || spec_mentions(spec_tau, treatment) {
        return Err(GkrlsError::Spec(format!("specs must not include the treatment '{treatment}'")));
    }
    let gauss = FitOptions {
        family: Family::Gaussian,
        ..opts.clone()
    };
    let m = crossfit_nuisance(data, &spec_nuisance.with_outcome(data.outcome_name()), &gauss, plan)?;
    let binom = FitOptions {
        family: Family::BinomialLogit,
        ..opts.clone()
    };
    let e = crossfit_nuisance(
        &data.with_outcome(treatment, w.clone())?,
        &spec_nuisance.with_outcome(treatment),
        &binom,
        plan,
    )?;
    let mut e_hat = e.predictions.clone();
    let trimmed = trim_propensity(&mut e_hat, trim);
    let mut est = rlearner_from_nuisance(data, &w, &m.predictions, &e_hat, spec_tau, plan, opts)?;
    est.trimmed_n = trimmed;
    Ok(est)
}
