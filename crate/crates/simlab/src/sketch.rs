//! Stability of sketched estimates relative to the unsketched fit.
//!
//! For each outer data set `s`, the unsketched AME error is
//! `|AME_unsketch − AME*|` and, for each multiplier `δ`, the sketched error is
//! the root mean square of `AME_δ^(m) − AME*` over `R` sketch draws. Both
//! are averaged over data sets and the relative impact is
//! `(mean RMSE_δ − mean RMSE_unsketch) / mean RMSE_unsketch`.

use gkrls_core::data::StandardizeKind;
use gkrls_core::kernel::SketchMethod;
use gkrls_core::model::{fit_model, FitOptions};
use gkrls_core::rng::derive_seed;
use gkrls_core::spec::{parse_spec, ModelSpec};
use gkrls_core::{GkrlsError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ame_point;
use crate::dgp::{fe_dgp, FeForm};
use crate::stats::{bootstrap_indices, Interval, DEFAULT_BOOTSTRAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FePlacement {
    /// Group indicators unpenalized, kernel on the covariates.
    Outside,
    /// Group indicators inside the kernel.
    Inside,
}

impl std::str::FromStr for FePlacement {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outside" => Ok(FePlacement::Outside),
            "inside" => Ok(FePlacement::Inside),
            _ => Err(GkrlsError::InvalidArgument(format!("unknown placement '{s}' (outside, inside)"))),
        }
    }
}

impl FePlacement {
    pub fn spec(self) -> Result<ModelSpec> {
        parse_spec(match self {
            FePlacement::Outside => "y ~ fixed(group) + kernel(x1, x2)",
            FePlacement::Inside => "y ~ kernel(x1, x2, group)",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchStabilityConfig {
    pub placement: FePlacement,
    pub deltas: Vec<f64>,
    /// Sketch draws per data set.
    pub inner: usize,
    /// Simulated data sets.
    pub outer: usize,
    pub rho: f64,
    pub form: FeForm,
    pub groups: usize,
    pub per_group: usize,
    pub standardize: StandardizeKind,
    pub seed: u64,
}

impl Default for SketchStabilityConfig {
    fn default() -> Self {
        Self {
            placement: FePlacement::Outside,
            deltas: vec![1.0, 3.0, 5.0, 15.0],
            inner: 20,
            outer: 20,
            rho: 0.9,
            form: FeForm::Nonlinear,
            groups: 50,
            per_group: 10,
            standardize: StandardizeKind::Mahalanobis,
            seed: 1,
        }
    }
}

/// One fitted AME; `delta` is `None` for the unsketched fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchRun {
    pub dataset: usize,
    pub delta: Option<f64>,
    pub draw: usize,
    pub ame_x1: f64,
    pub truth_x1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeImpact {
    pub delta: f64,
    pub mean_rmse: f64,
    pub mean_rmse_unsketched: f64,
    /// Estimate with a percentile-bootstrap interval over data sets.
    pub relative_impact: Interval,
}

fn options(cfg: &SketchStabilityConfig, method: SketchMethod, delta: f64, seed: u64) -> FitOptions {
    let mut o = FitOptions {
        seed,
        ..FitOptions::default()
    };
    o.kernel.method = method;
    o.kernel.delta = delta;
    o.kernel.standardize = cfg.standardize;
    o
}

fn dataset_runs(cfg: &SketchStabilityConfig, s: usize) -> Result<Vec<SketchRun>> {
    let seed = derive_seed(cfg.seed, s as u64);
    let (train, _) = fe_dgp(cfg.groups, cfg.per_group, cfg.rho, cfg.form, seed)?;
    let truth = train.true_ame().0;
    let spec = cfg.placement.spec()?;
    let mut runs = Vec::with_capacity(1 + cfg.deltas.len() * cfg.inner);
    let full = fit_model(&train.data, &spec, &options(cfg, SketchMethod::None, 1.0, seed))?;
    runs.push(SketchRun {
        dataset: s,
        delta: None,
        draw: 0,
        ame_x1: ame_point(&full, &train.data, "x1")?,
        truth_x1: truth,
    });
    for (di, &delta) in cfg.deltas.iter().enumerate() {
        for m in 0..cfg.inner {
            let fit_seed = derive_seed(derive_seed(seed, 1000 + di as u64), m as u64);
            let model = fit_model(&train.data, &spec, &options(cfg, SketchMethod::Subsample, delta, fit_seed))?;
            runs.push(SketchRun {
                dataset: s,
                delta: Some(delta),
                draw: m,
                ame_x1: ame_point(&model, &train.data, "x1")?,
                truth_x1: truth,
            });
        }
    }
    Ok(runs)
}

pub fn run_sketch_stability(cfg: &SketchStabilityConfig) -> Result<Vec<SketchRun>> {
    let nested: Vec<Vec<SketchRun>> = (0..cfg.outer)
        .into_par_iter()
        .map(|s| dataset_runs(cfg, s))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Per-data-set errors: `(unsketched, [(δ, RMSE_δ)])`, in data-set order.
fn per_dataset(runs: &[SketchRun]) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut sets: Vec<usize> = runs.iter().map(|r| r.dataset).collect();
    sets.sort_unstable();
    sets.dedup();
    let mut deltas: Vec<f64> = runs.iter().filter_map(|r| r.delta).collect();
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();
    let mut unsk = Vec::with_capacity(sets.len());
    let mut by_delta = vec![Vec::with_capacity(sets.len()); deltas.len()];
    for &s in &sets {
        let u = runs
            .iter()
            .find(|r| r.dataset == s && r.delta.is_none())
            .ok_or_else(|| GkrlsError::Data(format!("data set {s} has no unsketched run")))?;
        unsk.push((u.ame_x1 - u.truth_x1).abs());
        for (k, &d) in deltas.iter().enumerate() {
            let errs: Vec<f64> = runs
                .iter()
                .filter(|r| r.dataset == s && r.delta == Some(d))
                .map(|r| r.ame_x1 - r.truth_x1)
                .collect();
            if errs.is_empty() {
                return Err(GkrlsError::Data(format!("data set {s} has no runs at delta {d}")));
            }
            by_delta[k].push((errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt());
        }
    }
    Ok((sets, deltas, unsk, by_delta))
}

/// Relative impact per multiplier, computed from the stored runs.
pub fn relative_impact(runs: &[SketchRun], draws: usize, seed: u64) -> Result<Vec<RelativeImpact>> {
    let (sets, deltas, unsk, by_delta) = per_dataset(runs)?;
    Ok(deltas
        .iter()
        .zip(&by_delta)
        .enumerate()
        .map(|(k, (&delta, rm))| {
            let ratio = |idx: &[usize]| {
                let a = idx.iter().map(|&i| rm[i]).sum::<f64>() / idx.len() as f64;
                let b = idx.iter().map(|&i| unsk[i]).sum::<f64>() / idx.len() as f64;
                (a - b) / b
            };
            let all: Vec<usize> = (0..sets.len()).collect();
            RelativeImpact {
                delta,
                mean_rmse: all.iter().map(|&i| rm[i]).sum::<f64>() / all.len() as f64,
                mean_rmse_unsketched: unsk.iter().sum::<f64>() / unsk.len() as f64,
                relative_impact: bootstrap_indices(sets.len(), ratio, draws, 0.95, derive_seed(seed, k as u64)),
            }
        })
        .collect())
}

pub fn relative_impact_default(runs: &[SketchRun]) -> Result<Vec<RelativeImpact>> {
    relative_impact(runs, DEFAULT_BOOTSTRAP, 11)
}
