//! Pointwise interval coverage of the fitted surface on a grid.

use faer::Mat;
use gkrls_core::data::StandardizeKind;
use gkrls_core::inference::VarianceEstimate;
use gkrls_core::kernel::SketchMethod;
use gkrls_core::model::{fit_model, FitOptions, FittedModel};
use gkrls_core::reml::Smoothing;
use gkrls_core::rng::derive_seed;
use gkrls_core::spec::{parse_spec, ModelSpec};
use gkrls_core::{GkrlsError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{bivariate_coverage, coverage_grid};
use crate::stats::mean;

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMethod {
    /// Unsketched single kernel on the centered outcome without an
    /// intercept (the classic kernel ridge set-up), legacy variance.
    UnsketchedHh,
    /// The same fit with the Bayesian variance.
    UnsketchedBayes,
    /// Default sketched kernel, Bayesian variance.
    GkrlsBayes,
    /// Covariates also entered linearly, Bayesian variance.
    GkrlsLinearBayes,
}

pub const ALL_COVERAGE_METHODS: [CoverageMethod; 4] = [
    CoverageMethod::UnsketchedHh,
    CoverageMethod::UnsketchedBayes,
    CoverageMethod::GkrlsBayes,
    CoverageMethod::GkrlsLinearBayes,
];

impl CoverageMethod {
    pub fn name(self) -> &'static str {
        match self {
            CoverageMethod::UnsketchedHh => "unsketched_hh",
            CoverageMethod::UnsketchedBayes => "unsketched_bayes",
            CoverageMethod::GkrlsBayes => "gkrls_bayes",
            CoverageMethod::GkrlsLinearBayes => "gkrls_linear_bayes",
        }
    }

    fn unsketched(self) -> bool {
        matches!(self, CoverageMethod::UnsketchedHh | CoverageMethod::UnsketchedBayes)
    }
}

impl std::str::FromStr for CoverageMethod {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        ALL_COVERAGE_METHODS
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| GkrlsError::InvalidArgument(format!("unknown coverage method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub n: usize,
    pub sims: usize,
    pub grid: usize,
    pub methods: Vec<CoverageMethod>,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            n: 250,
            sims: 50,
            grid: 40,
            methods: ALL_COVERAGE_METHODS.to_vec(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub method: CoverageMethod,
    pub sim: usize,
    pub coverage: f64,
    pub mae: f64,
    pub avg_se: f64,
    pub error: Option<String>,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: CoverageMethod,
    pub coverage: f64,
    pub mae: f64,
    pub avg_se: f64,
    pub sims: usize,
    pub failures: usize,
}

/// `(prediction, standard error)` at each row of `rows`.
pub fn pointwise(model: &FittedModel, rows: &Mat<f64>, v: &VarianceEstimate) -> (Vec<f64>, Vec<f64>) {
    let pred = model.linear_predictor(rows.as_ref());
    let rv = rows * &v.reduced;
    let se = (0..rows.nrows())
        .map(|i| {
            let mut s = 0.0;
            for j in 0..rows.ncols() {
                s += rv[(i, j)] * rows[(i, j)];
            }
            s.max(0.0).sqrt()
        })
        .collect();
    (pred, se)
}

fn score(model: &FittedModel, rows: &Mat<f64>, v: &VarianceEstimate, offset: f64, truth: &[f64]) -> (f64, f64, f64) {
    let (mut pred, se) = pointwise(model, rows, v);
    for p in pred.iter_mut() {
        *p += offset;
    }
    let k = truth.len() as f64;
    let covered = (0..truth.len())
        .filter(|&i| (pred[i] - truth[i]).abs() <= Z95 * se[i])
        .count() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / k;
    (covered / k, mae, mean(&se))
}

fn spec_for(method: CoverageMethod) -> Result<ModelSpec> {
    parse_spec(match method {
        CoverageMethod::UnsketchedHh | CoverageMethod::UnsketchedBayes => "y ~ 0 + kernel(x, z)",
        CoverageMethod::GkrlsBayes => "y ~ kernel(x, z)",
        CoverageMethod::GkrlsLinearBayes => "y ~ fixed(x, z) + kernel(x, z)",
    })
}

fn simulate_once(cfg: &CoverageConfig, sim: usize, grid: &gkrls_core::data::Dataset, truth: &[f64]) -> Vec<CoverageRecord> {
    let seed = derive_seed(cfg.seed, sim as u64);
    let data = match bivariate_coverage(cfg.n, seed) {
        Ok((d, _)) => d,
        Err(e) => {
            return cfg
                .methods
                .iter()
                .map(|&m| failed(m, sim, &e))
                .collect()
        }
    };
    let y_mean = mean(data.outcome());
    let centered = match data.with_outcome("y", data.outcome().iter().map(|v| v - y_mean).collect()) {
        Ok(d) => d,
        Err(e) => return cfg.methods.iter().map(|&m| failed(m, sim, &e)).collect(),
    };
    let mut unsketched: Option<Result<FittedModel>> = None;
    cfg.methods
        .iter()
        .map(|&method| {
            let fitted = if method.unsketched() {
                let m = unsketched.get_or_insert_with(|| {
                    let mut o = FitOptions {
                        seed: derive_seed(seed, 1),
                        ..FitOptions::default()
                    };
                    o.kernel.method = SketchMethod::None;
                    o.kernel.standardize = StandardizeKind::Scale;
                    o.smoothing = Smoothing::Gcv;
                    fit_model(&centered, &spec_for(method)?, &o)
                });
                match m {
                    Ok(m) => Ok(m.clone()),
                    Err(e) => Err(GkrlsError::Convergence(e.to_string())),
                }
            } else {
                let o = FitOptions {
                    seed: derive_seed(seed, 2),
                    ..FitOptions::default()
                };
                spec_for(method).and_then(|s| fit_model(&data, &s, &o))
            };
            let result = fitted.and_then(|model| {
                let v = match method {
                    CoverageMethod::UnsketchedHh => model.variance_hh()?,
                    _ => model.variance_bayes()?,
                };
                let rows = model.design_rows(grid)?;
                let offset = if method.unsketched() { y_mean } else { 0.0 };
                Ok(score(&model, &rows, &v, offset, truth))
            });
            match result {
                Ok((coverage, mae, avg_se)) => CoverageRecord {
                    method,
                    sim,
                    coverage,
                    mae,
                    avg_se,
                    error: None,
                },
                Err(e) => failed(method, sim, &e),
            }
        })
        .collect()
}

fn failed(method: CoverageMethod, sim: usize, e: &GkrlsError) -> CoverageRecord {
    log::warn!("coverage fit {} failed in simulation {sim}: {e}", method.name());
    CoverageRecord {
        method,
        sim,
        coverage: f64::NAN,
        mae: f64::NAN,
        avg_se: f64::NAN,
        error: Some(e.to_string()),
    }
}

/// Failed fits are recorded, excluded from the averages and counted.
pub fn run_coverage(cfg: &CoverageConfig) -> Result<(Vec<CoverageRecord>, Vec<CoverageRow>)> {
    if cfg.grid < 2 {
        return Err(GkrlsError::InvalidArgument("coverage grid needs at least 2 points per side".into()));
    }
    let (grid, truth) = coverage_grid(cfg.grid)?;
    let nested: Vec<Vec<CoverageRecord>> = (0..cfg.sims)
        .into_par_iter()
        .map(|s| simulate_once(cfg, s, &grid, &truth))
        .collect();
    let records: Vec<CoverageRecord> = nested.into_iter().flatten().collect();
    let rows = cfg
        .methods
        .iter()
        .map(|&method| {
            let ok: Vec<&CoverageRecord> = records
                .iter()
                .filter(|r| r.method == method && r.error.is_none())
                .collect();
            let all = records.iter().filter(|r| r.method == method).count();
            let col = |f: fn(&CoverageRecord) -> f64| mean(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            CoverageRow {
                method,
                coverage: col(|r| r.coverage),
                mae: col(|r| r.mae),
                avg_se: col(|r| r.avg_se),
                sims: ok.len(),
                failures: all - ok.len(),
            }
        })
        .collect();
    Ok((records, rows))
}
