//! Replicated DML and R-learner runs on randomized-treatment data.

use gkrls_core::metalearn::{
    default_nuisance_spec, dml_ate, dml_plr, make_folds, rlearner, CausalEstimate, DEFAULT_FOLDS, DEFAULT_TRIM,
};
use gkrls_core::model::FitOptions;
use gkrls_core::rng::derive_seed;
use gkrls_core::spec::parse_spec;
use gkrls_core::{GkrlsError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{plr_synthetic, TREATMENT_COLUMN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalMethod {
    DmlPlr,
    DmlAte,
    Rlearner,
}

impl CausalMethod {
    pub fn name(self) -> &'static str {
        match self {
            CausalMethod::DmlPlr => "dml_plr",
            CausalMethod::DmlAte => "dml_ate",
            CausalMethod::Rlearner => "rlearner",
        }
    }
}

impl std::str::FromStr for CausalMethod {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dml_plr" | "plr" => Ok(CausalMethod::DmlPlr),
            "dml_ate" | "ate" => Ok(CausalMethod::DmlAte),
            "rlearner" => Ok(CausalMethod::Rlearner),
            _ => Err(GkrlsError::InvalidArgument(format!("unknown causal method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalStudyConfig {
    pub method: CausalMethod,
    pub n: usize,
    pub theta: f64,
    pub reps: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CausalStudyConfig {
    fn default() -> Self {
        Self {
            method: CausalMethod::DmlPlr,
            n: 2000,
            theta: 0.5,
            reps: 100,
            folds: DEFAULT_FOLDS,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalRecord {
    pub method: CausalMethod,
    pub replicate: usize,
    pub theta: f64,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub hygiene_checked: bool,
}

/// One replicate: simulate, cross-fit and estimate.
pub fn causal_replicate(cfg: &CausalStudyConfig, rep: usize) -> Result<CausalEstimate> {
    let seed = derive_seed(cfg.seed, rep as u64);
    let data = plr_synthetic(cfg.n, cfg.theta, seed)?;
    let plan = make_folds(&data, cfg.folds, None, derive_seed(seed, 1))?;
    let spec = default_nuisance_spec(&data, "y", &[TREATMENT_COLUMN])?;
    let opts = FitOptions {
        seed: derive_seed(seed, 2),
        ..FitOptions::default()
    };
    match cfg.method {
        CausalMethod::DmlPlr => dml_plr(&data, TREATMENT_COLUMN, &spec, &plan, &opts),
        CausalMethod::DmlAte => dml_ate(&data, TREATMENT_COLUMN, &spec, &plan, DEFAULT_TRIM, &opts),
        CausalMethod::Rlearner => {
            let tau = parse_spec("pseudo_outcome ~ kernel(x1, x2, x3)")?;
            rlearner(&data, TREATMENT_COLUMN, &spec, &tau, &plan, DEFAULT_TRIM, &opts)
        }
    }
}

pub fn run_causal_study(cfg: &CausalStudyConfig) -> Result<Vec<CausalRecord>> {
    (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let est = causal_replicate(cfg, rep)?;
            Ok(CausalRecord {
                method: cfg.method,
                replicate: rep,
                theta: cfg.theta,
                estimate: est.theta,
                se: est.se,
                ci_lo: est.ci.0,
                ci_hi: est.ci.1,
                covered: est.ci.0 <= cfg.theta && cfg.theta <= est.ci.1,
                hygiene_checked: est.fold_hygiene_checked,
            })
        })
        .collect()
}
