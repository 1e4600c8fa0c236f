//! Out-of-sample accuracy and AME error on the Three Hills surface.

use gkrls_core::kernel::{SketchMethod, DEFAULT_DELTA};
use gkrls_core::model::{fit_model, FitOptions};
use gkrls_core::rng::derive_seed;
use gkrls_core::solver::Scale;
use gkrls_core::spec::parse_spec;
use gkrls_core::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::three_hills;
use crate::stats::{bootstrap, median, rmse, Interval, DEFAULT_BOOTSTRAP};
use crate::{ame_point, timed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeHillsConfig {
    pub n: usize,
    pub reps: usize,
    pub method: SketchMethod,
    pub delta: f64,
    pub seed: u64,
}

impl Default for ThreeHillsConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            reps: 20,
            method: SketchMethod::Subsample,
            delta: DEFAULT_DELTA,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeHillsRecord {
    pub replicate: usize,
    pub n: usize,
    pub method: SketchMethod,
    pub delta: f64,
    pub oos_rmse: f64,
    pub ame_x1: f64,
    pub ame_x2: f64,
    pub truth_x1: f64,
    pub truth_x2: f64,
    pub fit_seconds: f64,
}

impl ThreeHillsRecord {
    /// Root mean squared AME error over both covariates.
    pub fn ame_rmse(&self) -> f64 {
        (((self.ame_x1 - self.truth_x1).powi(2) + (self.ame_x2 - self.truth_x2).powi(2)) / 2.0).sqrt()
    }
}

fn replicate(cfg: &ThreeHillsConfig, r: usize) -> Result<ThreeHillsRecord> {
    let seed = derive_seed(cfg.seed, r as u64);
    let train = three_hills(cfg.n, derive_seed(seed, 0))?;
    let test = three_hills(cfg.n, derive_seed(seed, 1))?;
    let mut opts = FitOptions {
        seed: derive_seed(seed, 2),
        ..FitOptions::default()
    };
    opts.kernel.method = cfg.method;
    opts.kernel.delta = cfg.delta;
    let spec = parse_spec("y ~ kernel(x1, x2)")?;
    let (model, secs) = timed(|| fit_model(&train.data, &spec, &opts))?;
    let pred = model.predict(&test.data, Scale::Response)?;
    let (t1, t2) = train.true_ame();
    Ok(ThreeHillsRecord {
        replicate: r,
        n: cfg.n,
        method: cfg.method,
        delta: cfg.delta,
        oos_rmse: rmse(&pred, test.data.outcome()),
        ame_x1: ame_point(&model, &train.data, "x1")?,
        ame_x2: ame_point(&model, &train.data, "x2")?,
        truth_x1: t1,
        truth_x2: t2,
        fit_seconds: secs,
    })
}

pub fn run_three_hills(cfg: &ThreeHillsConfig) -> Result<Vec<ThreeHillsRecord>> {
    (0..cfg.reps).into_par_iter().map(|r| replicate(cfg, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeHillsSummary {
    pub n: usize,
    pub method: SketchMethod,
    pub delta: f64,
    pub reps: usize,
    pub median_oos_rmse: f64,
    pub oos_rmse: Interval,
    pub ame_rmse: Interval,
}

pub fn summarize(records: &[ThreeHillsRecord], seed: u64) -> Option<ThreeHillsSummary> {
    let first = records.first()?;
    let oos: Vec<f64> = records.iter().map(|r| r.oos_rmse).collect();
    let errs: Vec<f64> = records.iter().map(|r| r.ame_rmse()).collect();
    Some(ThreeHillsSummary {
        n: first.n,
        method: first.method,
        delta: first.delta,
        reps: records.len(),
        median_oos_rmse: median(&oos),
        oos_rmse: bootstrap(&oos, crate::stats::mean, DEFAULT_BOOTSTRAP, 0.95, seed),
        ame_rmse: bootstrap(&errs, crate::stats::mean, DEFAULT_BOOTSTRAP, 0.95, seed ^ 1),
    })
}
