//! Wall-clock scaling of estimation, prediction and marginal effects.

use gkrls_core::effects::{ame, EffectOptions};
use gkrls_core::kernel::{SketchMethod, DEFAULT_DELTA};
use gkrls_core::model::{fit_model, FitOptions};
use gkrls_core::rng::derive_seed;
use gkrls_core::solver::Scale;
use gkrls_core::spec::parse_spec;
use gkrls_core::Result;
use serde::{Deserialize, Serialize};

use crate::dgp::three_hills;
use crate::stats::{log_log_slope, median};
use crate::timed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub ns: Vec<usize>,
    pub method: SketchMethod,
    pub delta: f64,
    pub reps: usize,
    /// Also time prediction and marginal effects.
    pub all_stages: bool,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            ns: vec![1000, 3162, 10_000],
            method: SketchMethod::Subsample,
            delta: DEFAULT_DELTA,
            reps: 1,
            all_stages: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub method: SketchMethod,
    pub delta: f64,
    pub n: usize,
    pub replicate: usize,
    pub n_coef: usize,
    pub estimation_seconds: f64,
    pub prediction_seconds: Option<f64>,
    pub effects_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Estimation,
    Prediction,
    Effects,
}

impl Stage {
    fn pick(self, r: &TimingRecord) -> Option<f64> {
        match self {
            Stage::Estimation => Some(r.estimation_seconds),
            Stage::Prediction => r.prediction_seconds,
            Stage::Effects => r.effects_seconds,
        }
    }
}

/// Log-log fit of median time against `N` for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub method: SketchMethod,
    pub stage: Stage,
    pub slope: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub medians: Vec<(usize, f64)>,
}

/// Sequential on purpose: timings from concurrent fits are not comparable.
pub fn run_scaling(cfg: &ScalingConfig) -> Result<Vec<TimingRecord>> {
    let spec = parse_spec("y ~ kernel(x1, x2)")?;
    let mut out = Vec::new();
    for &n in &cfg.ns {
        for r in 0..cfg.reps {
            let seed = derive_seed(derive_seed(cfg.seed, n as u64), r as u64);
            let train = three_hills(n, seed)?;
            let mut opts = FitOptions {
                seed: derive_seed(seed, 1),
                ..FitOptions::default()
            };
            opts.kernel.method = cfg.method;
            opts.kernel.delta = cfg.delta;
            let (model, est) = timed(|| fit_model(&train.data, &spec, &opts))?;
            let n_coef = model.coef.len();
            let (pred, eff) = if cfg.all_stages {
                let model = model.without_training();
                let test = three_hills(n, derive_seed(seed, 2))?;
                let (_, p) = timed(|| model.predict(&test.data, Scale::Response))?;
                let (_, e) = timed(|| {
                    ame(&model, &train.data, "x1", &EffectOptions::default())?;
                    ame(&model, &train.data, "x2", &EffectOptions::default())
                })?;
                (Some(p), Some(e))
            } else {
                (None, None)
            };
            log::info!("scaling n={n} rep={r} estimation {est:.3}s");
            out.push(TimingRecord {
                method: cfg.method,
                delta: cfg.delta,
                n,
                replicate: r,
                n_coef,
                estimation_seconds: est,
                prediction_seconds: pred,
                effects_seconds: eff,
            });
        }
    }
    Ok(out)
}

/// Median time per `N` and the log-log slope, for each stage present.
pub fn slopes(records: &[TimingRecord]) -> Vec<SlopeFit> {
    let Some(first) = records.first() else {
        return vec![];
    };
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut out = Vec::new();
    for stage in [Stage::Estimation, Stage::Prediction, Stage::Effects] {
        let medians: Vec<(usize, f64)> = ns
            .iter()
            .filter_map(|&n| {
                let t: Vec<f64> = records.iter().filter(|r| r.n == n).filter_map(|r| stage.pick(r)).collect();
                (!t.is_empty()).then(|| (n, median(&t)))
            })
            .collect();
        if medians.len() < 2 {
            continue;
        }
        let x: Vec<f64> = medians.iter().map(|m| m.0 as f64).collect();
        let y: Vec<f64> = medians.iter().map(|m| m.1.max(1e-9)).collect();
        out.push(SlopeFit {
            method: first.method,
            stage,
            slope: log_log_slope(&x, &y),
            n_min: ns[0],
            n_max: *ns.last().expect("non-empty"),
            medians,
        });
    }
    out
}
