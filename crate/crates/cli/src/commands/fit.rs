use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use gkrls_core::family::Family;
use gkrls_core::inference::SeKind;
use gkrls_core::kernel::SketchMethod;
use gkrls_core::model::{fit_model, FitOptions, FittedModel};
use gkrls_core::persistence::encode_model;
use gkrls_core::reml::{Smoothing, TracePoint};
use serde::Serialize;

use super::KernelArgs;
use crate::{read_spec, write_bytes, write_json_file, CliResult, DataArgs, EXIT_CONVERGENCE, EXIT_OK};

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingRule {
    Reml,
    Gcv,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model formula or JSON, inline or as a file path.
    #[arg(long)]
    pub spec: String,
    /// gaussian, binomial or poisson.
    #[arg(long, default_value = "gaussian")]
    pub family: Family,
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Standard errors: bayes, robust or cluster:COLUMN.
    #[arg(long, default_value = "bayes")]
    pub se: SeKind,
    /// Smoothing-parameter selection rule.
    #[arg(long, value_enum, default_value = "reml", conflicts_with = "lambda")]
    pub smoothing: SmoothingRule,
    /// Fixed smoothing parameters, one per penalized term (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    /// Model artifact path (.gkm).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON fit report; defaults to the artifact path with a .json extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct StageSeconds {
    pub load: f64,
    pub estimation: f64,
    pub save: f64,
}

#[derive(Debug, Serialize)]
pub struct FixedCoefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Serialize)]
pub struct SketchReport {
    pub term: String,
    pub method: SketchMethod,
    pub delta: f64,
    pub dimension: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct FitReport<'a> {
    pub version: &'static str,
    pub artifact: &'a std::path::Path,
    pub outcome: &'a str,
    pub family: Family,
    pub n: usize,
    pub n_coef: usize,
    pub lambda: &'a [f64],
    pub scale: f64,
    pub edf: f64,
    pub smoothing: &'a Smoothing,
    pub criterion: Option<f64>,
    pub converged: bool,
    pub optimizer_iterations: usize,
    pub criterion_trace: &'a [TracePoint],
    pub se: String,
    pub fixed: Vec<FixedCoefficient>,
    pub sketches: Vec<SketchReport>,
    pub warnings: &'a [String],
    pub seconds: StageSeconds,
    pub config: &'a FitArgs,
    pub seed: u64,
}

pub fn report<'a>(a: &'a FitArgs, seed: u64, model: &'a FittedModel, seconds: StageSeconds) -> FitReport<'a> {
    let d = &model.diagnostics;
    let se = model.fixed_se();
    let fixed = model
        .fixed_names()
        .into_iter()
        .zip(model.coefficients().0)
        .zip(se)
        .map(|((name, estimate), se)| FixedCoefficient { name, estimate, se })
        .collect();
    let sketches = model
        .sketch_plans()
        .into_iter()
        .map(|(term, p)| SketchReport {
            term,
            method: p.method,
            delta: p.delta,
            dimension: p.dimension,
            seed: p.seed,
        })
        .collect();
    FitReport {
        version: env!("CARGO_PKG_VERSION"),
        artifact: &a.out,
        outcome: model.outcome_name(),
        family: model.family,
        n: d.n,
        n_coef: d.n_coef,
        lambda: &model.lambda,
        scale: model.scale,
        edf: d.edf,
        smoothing: &d.smoothing,
        criterion: d.criterion,
        converged: d.converged,
        optimizer_iterations: d.optimizer_iterations,
        criterion_trace: &d.optimizer_trace,
        se: model.se_kind.to_string(),
        fixed,
        sketches,
        warnings: &d.warnings,
        seconds,
        config: a,
        seed,
    }
}

pub fn run(a: &FitArgs, seed: u64) -> CliResult<i32> {
    let spec = read_spec(&a.spec)?;
    let t = Instant::now();
    let mut roles = a.data.roles(&spec.outcome)?;
    if let SeKind::Cluster(c) = &a.se {
        if roles.cluster.is_none() {
            roles.cluster = Some(c.clone());
        } else if roles.cluster.as_deref() != Some(c.as_str()) && !roles.categorical.contains(c) {
            roles.categorical.push(c.clone());
        }
    }
    let data = gkrls_core::data::load_csv(&a.data.data, &roles)?;
    let load = t.elapsed().as_secs_f64();
    let opts = FitOptions {
        family: a.family,
        smoothing: if !a.lambda.is_empty() {
            Smoothing::Fixed(a.lambda.clone())
        } else {
            match a.smoothing {
                SmoothingRule::Reml => Smoothing::Reml,
                SmoothingRule::Gcv => Smoothing::Gcv,
            }
        },
        kernel: a.kernel.defaults(),
        seed,
        se: a.se.clone(),
        ..FitOptions::default()
    };
    let t = Instant::now();
    let model = fit_model(&data, &spec, &opts)?;
    let estimation = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let bytes = encode_model(&model)?;
    write_bytes(&a.out, &bytes)?;
    let save = t.elapsed().as_secs_f64();
    for w in &model.diagnostics.warnings {
        log::warn!("{w}");
    }
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("json"));
    let rep = report(a, seed, &model, StageSeconds { load, estimation, save });
    write_json_file(&report_path, &rep)?;
    log::info!(
        "fit n={} lambda={:?} scale={:.6} edf={:.3} in {estimation:.3}s",
        rep.n,
        rep.lambda,
        rep.scale,
        rep.edf
    );
    if !model.diagnostics.converged {
        eprintln!(
            "error: smoothing selection did not converge; artifact {} written and flagged in {}",
            a.out.display(),
            report_path.display()
        );
        return Ok(EXIT_CONVERGENCE);
    }
    Ok(EXIT_OK)
}
