//! Fixed-effects study: AME and out-of-sample accuracy of linear and kernel
//! estimators as the group effects correlate with `x1`.

use gkrls_core::kernel::SketchMethod;
use gkrls_core::model::{fit_model, FitOptions};
use gkrls_core::reml::Smoothing;
use gkrls_core::rng::derive_seed;
use gkrls_core::solver::Scale;
use gkrls_core::spec::{parse_spec, ModelSpec};
use gkrls_core::{GkrlsError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{fe_dgp, FeForm, Simulated};
use crate::stats::{bootstrap, mean, median, rmse, Interval, DEFAULT_BOOTSTRAP};
use crate::{ame_point, timed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeMethod {
    Ols,
    FixedEffects,
    RandomEffects,
    /// Unsketched kernel over covariates and group indicators, scaled
    /// inputs, GCV smoothing.
    KernelFeInside,
    /// Group indicators unpenalized, sketched kernel on the covariates.
    GkrlsFeOutside,
    /// As `GkrlsFeOutside` plus the covariates as unpenalized terms.
    GkrlsPlusLinear,
}

pub const ALL_FE_METHODS: [FeMethod; 6] = [
    FeMethod::Ols,
    FeMethod::FixedEffects,
    FeMethod::RandomEffects,
    FeMethod::KernelFeInside,
    FeMethod::GkrlsFeOutside,
    FeMethod::GkrlsPlusLinear,
];

impl FeMethod {
    pub fn name(self) -> &'static str {
        match self {
            FeMethod::Ols => "ols",
            FeMethod::FixedEffects => "fixed_effects",
            FeMethod::RandomEffects => "random_effects",
            FeMethod::KernelFeInside => "kernel_fe_inside",
            FeMethod::GkrlsFeOutside => "gkrls_fe_outside",
            FeMethod::GkrlsPlusLinear => "gkrls_plus_linear",
        }
    }

    pub fn spec(self) -> Result<ModelSpec> {
        parse_spec(match self {
            FeMethod::Ols => "y ~ fixed(x1, x2)",
            FeMethod::FixedEffects => "y ~ fixed(x1, x2, group)",
            FeMethod::RandomEffects => "y ~ fixed(x1, x2) + re(group)",
            FeMethod::KernelFeInside => "y ~ kernel(x1, x2, group; sketch=none, standardize=scale)",
            FeMethod::GkrlsFeOutside => "y ~ fixed(group) + kernel(x1, x2)",
            FeMethod::GkrlsPlusLinear => "y ~ fixed(group, x1, x2) + kernel(x1, x2)",
        })
    }

    pub fn options(self, seed: u64) -> FitOptions {
        let mut o = FitOptions {
            seed,
            ..FitOptions::default()
        };
        if self == FeMethod::KernelFeInside {
            o.smoothing = Smoothing::Gcv;
            o.kernel.method = SketchMethod::None;
        }
        o
    }
}

impl std::str::FromStr for FeMethod {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        ALL_FE_METHODS
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| GkrlsError::InvalidArgument(format!("unknown fixed-effects method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeStudyConfig {
    pub rhos: Vec<f64>,
    pub forms: Vec<FeForm>,
    pub methods: Vec<FeMethod>,
    pub reps: usize,
    pub groups: usize,
    pub per_group: usize,
    pub seed: u64,
}

impl Default for FeStudyConfig {
    fn default() -> Self {
        Self {
            rhos: vec![0.0, 0.3, 0.6, 0.9],
            forms: vec![FeForm::Linear, FeForm::Nonlinear],
            methods: ALL_FE_METHODS.to_vec(),
            reps: 200,
            groups: 50,
            per_group: 10,
            seed: 1,
        }
    }
}

/// One fit of one method on one simulated data set. Failed fits keep
/// their error text and NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeRecord {
    pub form: FeForm,
    pub rho: f64,
    pub method: FeMethod,
    pub replicate: usize,
    pub ame_x1: f64,
    pub ame_x2: f64,
    pub truth_x1: f64,
    pub truth_x2: f64,
    pub oos_rmse: f64,
    pub fit_seconds: f64,
    pub error: Option<String>,
}

impl FeRecord {
    pub fn err_x1(&self) -> f64 {
        self.ame_x1 - self.truth_x1
    }
    pub fn err_x2(&self) -> f64 {
        self.ame_x2 - self.truth_x2
    }
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn fit_one(method: FeMethod, train: &Simulated, test: &Simulated, seed: u64) -> Result<(f64, f64, f64, f64)> {
    let spec = method.spec()?;
    let (model, secs) = timed(|| fit_model(&train.data, &spec, &method.options(seed)))?;
    let pred = model.predict(&test.data, Scale::Response)?;
    Ok((
        ame_point(&model, &train.data, "x1")?,
        ame_point(&model, &train.data, "x2")?,
        rmse(&pred, test.data.outcome()),
        secs,
    ))
}

fn cell_seed(seed: u64, form: FeForm, rho_index: usize, rep: usize) -> u64 {
    let f = match form {
        FeForm::Linear => 0,
        FeForm::Nonlinear => 1,
    };
    derive_seed(derive_seed(derive_seed(seed, f), rho_index as u64), rep as u64)
}

/// Every method is fitted on the same simulated data within a replicate.
pub fn run_fe_study(cfg: &FeStudyConfig) -> Result<Vec<FeRecord>> {
    let mut jobs = Vec::new();
    for &form in &cfg.forms {
        for (ri, &rho) in cfg.rhos.iter().enumerate() {
            for rep in 0..cfg.reps {
                jobs.push((form, ri, rho, rep));
            }
        }
    }
    let nested: Vec<Vec<FeRecord>> = jobs
        .into_par_iter()
        .map(|(form, ri, rho, rep)| {
            let seed = cell_seed(cfg.seed, form, ri, rep);
            let (train, test) = fe_dgp(cfg.groups, cfg.per_group, rho, form, seed)?;
            let (t1, t2) = train.true_ame();
            Ok(cfg
                .methods
                .iter()
                .map(|&method| {
                    let base = FeRecord {
                        form,
                        rho,
                        method,
                        replicate: rep,
                        ame_x1: f64::NAN,
                        ame_x2: f64::NAN,
                        truth_x1: t1,
                        truth_x2: t2,
                        oos_rmse: f64::NAN,
                        fit_seconds: f64::NAN,
                        error: None,
                    };
                    match fit_one(method, &train, &test, derive_seed(seed, 99)) {
                        Ok((a1, a2, oos, secs)) => FeRecord {
                            ame_x1: a1,
                            ame_x2: a2,
                            oos_rmse: oos,
                            fit_seconds: secs,
                            ..base
                        },
                        Err(e) => {
                            log::warn!("{} failed on replicate {rep}: {e}", method.name());
                            FeRecord {
                                error: Some(e.to_string()),
                                ..base
                            }
                        }
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Aggregates for one `(form, ρ, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeCell {
    pub form: FeForm,
    pub rho: f64,
    pub method: FeMethod,
    pub reps: usize,
    pub failures: usize,
    pub ame_rmse_x1: Interval,
    pub ame_bias_x1: Interval,
    pub ame_rmse_x2: Interval,
    pub ame_bias_x2: Interval,
    pub median_abs_error_x1: f64,
    pub median_bias_x1: f64,
    pub oos_rmse: Interval,
}

fn root_mean_square(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn summarize_fe(records: &[FeRecord], draws: usize, seed: u64) -> Vec<FeCell> {
    let mut keys: Vec<(FeForm, f64, FeMethod)> = Vec::new();
    for r in records {
        if !keys.iter().any(|k| k.0 == r.form && k.1 == r.rho && k.2 == r.method) {
            keys.push((r.form, r.rho, r.method));
        }
    }
    keys.iter()
        .enumerate()
        .map(|(c, &(form, rho, method))| {
            let cell: Vec<&FeRecord> = records
                .iter()
                .filter(|r| r.form == form && r.rho == rho && r.method == method)
                .collect();
            let ok: Vec<&&FeRecord> = cell.iter().filter(|r| r.ok()).collect();
            let e1: Vec<f64> = ok.iter().map(|r| r.err_x1()).collect();
            let e2: Vec<f64> = ok.iter().map(|r| r.err_x2()).collect();
            let oos: Vec<f64> = ok.iter().map(|r| r.oos_rmse).collect();
            let abs1: Vec<f64> = e1.iter().map(|v| v.abs()).collect();
            let s = derive_seed(seed, c as u64);
            FeCell {
                form,
                rho,
                method,
                reps: cell.len(),
                failures: cell.len() - ok.len(),
                ame_rmse_x1: bootstrap(&e1, root_mean_square, draws, 0.95, s),
                ame_bias_x1: bootstrap(&e1, mean, draws, 0.95, s ^ 1),
                ame_rmse_x2: bootstrap(&e2, root_mean_square, draws, 0.95, s ^ 2),
                ame_bias_x2: bootstrap(&e2, mean, draws, 0.95, s ^ 3),
                median_abs_error_x1: median(&abs1),
                median_bias_x1: median(&e1),
                oos_rmse: bootstrap(&oos, mean, draws, 0.95, s ^ 4),
            }
        })
        .collect()
}

pub fn summarize_fe_default(records: &[FeRecord]) -> Vec<FeCell> {
    summarize_fe(records, DEFAULT_BOOTSTRAP, 7)
}
