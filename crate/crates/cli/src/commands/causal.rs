use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use gkrls_core::data::Dataset;
use gkrls_core::metalearn::{
    default_nuisance_spec, dml_ate, dml_plr, make_folds, rlearner, CausalEstimate, FoldPlan, DEFAULT_FOLDS,
    DEFAULT_TRIM, PSEUDO_OUTCOME,
};
use gkrls_core::model::FitOptions;
use gkrls_core::rng::derive_seed;
use gkrls_core::spec::ModelSpec;
use serde::Serialize;

use super::KernelArgs;
use crate::{emit_json, read_spec, CliResult, DataArgs, EXIT_OK};

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    /// Partially linear model, residual on residual.
    Plr,
    /// Average treatment effect, augmented inverse-propensity weighting.
    Ate,
}

/// Options shared by the cross-fitted estimators.
#[derive(Debug, Args, Serialize)]
pub struct CrossFitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Outcome column.
    #[arg(long)]
    pub outcome: String,
    /// Binary or continuous treatment column.
    #[arg(long)]
    pub treatment: String,
    /// Nuisance model; defaults to all other covariates linear plus one kernel over them.
    #[arg(long)]
    pub spec: Option<String>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    /// Categorical column to stratify the folds by.
    #[arg(long)]
    pub stratify: Option<String>,
    /// Propensity trimming bounds lo,hi.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [DEFAULT_TRIM.0, DEFAULT_TRIM.1])]
    pub trim: Vec<f64>,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DmlArgs {
    #[command(flatten)]
    pub common: CrossFitArgs,
    #[arg(long, value_enum, default_value = "plr")]
    pub estimand: Estimand,
}

#[derive(Debug, Args, Serialize)]
pub struct RlearnerArgs {
    #[command(flatten)]
    pub common: CrossFitArgs,
    /// Effect model with outcome `pseudo_outcome`; defaults to the nuisance covariates.
    #[arg(long)]
    pub tau_spec: Option<String>,
}

#[derive(Debug, Serialize)]
struct CausalOutput<'a, A: Serialize> {
    estimate: &'a CausalEstimate,
    seconds: f64,
    seed: u64,
    config: &'a A,
}

struct Prepared {
    data: Dataset,
    spec: ModelSpec,
    plan: FoldPlan,
    opts: FitOptions,
}

fn prepare(c: &CrossFitArgs, seed: u64) -> CliResult<Prepared> {
    let mut roles = c.data.roles(&c.outcome)?;
    if let Some(s) = &c.stratify {
        if roles.cluster.as_deref() != Some(s.as_str()) && !roles.categorical.contains(s) {
            roles.categorical.push(s.clone());
        }
    }
    let data = gkrls_core::data::load_csv(&c.data.data, &roles)?;
    let spec = match &c.spec {
        Some(s) => read_spec(s)?,
        None => default_nuisance_spec(&data, &c.outcome, &[c.treatment.as_str()])?,
    };
    let plan = make_folds(&data, c.folds, c.stratify.as_deref(), derive_seed(seed, 1))?;
    let opts = FitOptions {
        kernel: c.kernel.defaults(),
        seed: derive_seed(seed, 2),
        ..FitOptions::default()
    };
    Ok(Prepared { data, spec, plan, opts })
}

fn trim(c: &CrossFitArgs) -> (f64, f64) {
    (c.trim[0], c.trim[1])
}

fn finish<A: Serialize>(c: &CrossFitArgs, est: &CausalEstimate, secs: f64, seed: u64, config: &A) -> CliResult<i32> {
    log::info!("{}: theta {:.6} (se {:.6}) in {secs:.3}s", est.method, est.theta, est.se);
    emit_json(
        c.out.as_deref(),
        &CausalOutput {
            estimate: est,
            seconds: secs,
            seed,
            config,
        },
    )?;
    Ok(EXIT_OK)
}

pub fn run_dml(a: &DmlArgs, seed: u64) -> CliResult<i32> {
    let t = Instant::now();
    let p = prepare(&a.common, seed)?;
    let tr = a.common.treatment.as_str();
    let est = match a.estimand {
        Estimand::Plr => dml_plr(&p.data, tr, &p.spec, &p.plan, &p.opts)?,
        Estimand::Ate => dml_ate(&p.data, tr, &p.spec, &p.plan, trim(&a.common), &p.opts)?,
    };
    finish(&a.common, &est, t.elapsed().as_secs_f64(), seed, a)
}

pub fn run_rlearner(a: &RlearnerArgs, seed: u64) -> CliResult<i32> {
    let t = Instant::now();
    let p = prepare(&a.common, seed)?;
    let tau = match &a.tau_spec {
        Some(s) => read_spec(s)?,
        None => p.spec.with_outcome(PSEUDO_OUTCOME),
    };
    let est = rlearner(
        &p.data,
        &a.common.treatment,
        &p.spec,
        &tau,
        &p.plan,
        trim(&a.common),
        &p.opts,
    )?;
    finish(&a.common, &est, t.elapsed().as_secs_f64(), seed, a)
}
