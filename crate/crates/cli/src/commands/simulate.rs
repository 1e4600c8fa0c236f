use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gkrls_core::data::Dataset;
use gkrls_core::kernel::{SketchMethod, DEFAULT_DELTA};
use gkrls_core::GkrlsError;
use gkrls_simlab::causal::{run_causal_study, CausalMethod, CausalRecord, CausalStudyConfig};
use gkrls_simlab::coverage::{run_coverage, CoverageConfig};
use gkrls_simlab::dgp::{bivariate_coverage, fe_dgp, plr_synthetic, three_hills, DgpKind, FeForm};
use gkrls_simlab::fe::{run_fe_study, summarize_fe_default, FeMethod, FeStudyConfig, ALL_FE_METHODS};
use gkrls_simlab::sketch::{relative_impact_default, run_sketch_stability, FePlacement, SketchStabilityConfig};
use gkrls_simlab::stats::mean;
use gkrls_simlab::three_hills::{run_three_hills, summarize, ThreeHillsConfig};
use gkrls_simlab::Scale;
use serde::Serialize;

use crate::{emit_csv, write_bytes, write_json_file, CliError, CliResult, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// Replicated fits of the data-generating process.
    Replicates,
    /// Sketched against unsketched AMEs on the fixed-effects process.
    SketchStability,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// three_hills, fe_linear, fe_nonlinear, bivariate_coverage or plr_synthetic.
    #[arg(long)]
    pub dgp: DgpKind,
    #[arg(long, value_enum, default_value = "replicates")]
    pub study: Study,
    /// Observations per data set (three_hills, bivariate_coverage, plr_synthetic).
    #[arg(long)]
    pub n: Option<usize>,
    /// Replicates (outer data sets for sketch stability).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Sketch draws per data set (sketch stability).
    #[arg(long)]
    pub inner: Option<usize>,
    /// Sketch method for three_hills.
    #[arg(long, default_value = "subsample")]
    pub sketch: SketchMethod,
    /// Sketch multipliers (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub delta: Vec<f64>,
    /// Correlation between x1 and the group effects (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rho: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub groups: usize,
    #[arg(long, default_value_t = 10)]
    pub per_group: usize,
    /// Fixed-effects placement for sketch stability: outside or inside.
    #[arg(long, default_value = "outside")]
    pub placement: FePlacement,
    /// Methods to compare (comma separated); study-specific names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// True effect for plr_synthetic.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub theta: f64,
    /// Use the replicate counts of the original study design.
    #[arg(long)]
    pub full_scale: bool,
    /// Write one simulated data set to this CSV and skip the study.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    /// Per-replicate records CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

impl SimulateArgs {
    fn scale(&self) -> Scale {
        if self.full_scale {
            Scale::Full
        } else {
            Scale::Desk
        }
    }

    fn reps(&self, desk: usize, full: usize) -> usize {
        self.reps.unwrap_or_else(|| self.scale().pick(desk, full))
    }

    fn form(&self) -> Option<FeForm> {
        match self.dgp {
            DgpKind::FeLinear => Some(FeForm::Linear),
            DgpKind::FeNonlinear => Some(FeForm::Nonlinear),
            _ => None,
        }
    }

    fn parse_methods<T: std::str::FromStr<Err = GkrlsError>>(&self) -> CliResult<Vec<T>> {
        Ok(self.methods.iter().map(|m| m.parse()).collect::<Result<Vec<T>, _>>()?)
    }
}

fn write_summary<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    match path {
        Some(p) => write_json_file(p, value),
        None => Ok(()),
    }
}

/// Outcome first, then numeric covariates, categorical labels and the cluster.
pub fn dataset_csv(data: &Dataset) -> CliResult<Vec<u8>> {
    let expanded: Vec<&String> = data.expansions().iter().flat_map(|e| e.columns.iter()).collect();
    let numeric: Vec<&String> = data.names().iter().filter(|n| !expanded.contains(n)).collect();
    let mut header: Vec<String> = vec![data.outcome_name().to_string()];
    header.extend(numeric.iter().map(|s| s.to_string()));
    header.extend(data.expansions().iter().map(|e| e.source.clone()));
    if let Some(c) = data.cluster() {
        header.push(c.name.clone());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(GkrlsError::from)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = vec![data.outcome()[i].to_string()];
        for n in &numeric {
            rec.push(data.column(n).expect("named column")[i].to_string());
        }
        for e in data.expansions() {
            let f = data
                .factor(&e.source)
                .ok_or_else(|| GkrlsError::Data(format!("factor '{}' missing", e.source)))?;
            rec.push(f.label(i).to_string());
        }
        if let Some(c) = data.cluster() {
            rec.push(c.label(i).to_string());
        }
        w.write_record(&rec).map_err(GkrlsError::from)?;
    }
    w.into_inner().map_err(|e| GkrlsError::Data(e.to_string()).into())
}

fn emit_dataset(a: &SimulateArgs, path: &Path, seed: u64) -> CliResult<i32> {
    let data = match a.dgp {
        DgpKind::ThreeHills => three_hills(a.n.unwrap_or(3000), seed)?.data,
        DgpKind::FeLinear | DgpKind::FeNonlinear => {
            let rho = a.rho.first().copied().unwrap_or(0.0);
            fe_dgp(a.groups, a.per_group, rho, a.form().expect("fe process"), seed)?.0.data
        }
        DgpKind::BivariateCoverage => bivariate_coverage(a.n.unwrap_or(250), seed)?.0,
        DgpKind::PlrSynthetic => plr_synthetic(a.n.unwrap_or(2000), a.theta, seed)?,
    };
    write_bytes(path, &dataset_csv(&data)?)?;
    log::info!("wrote {} rows to {}", data.n(), path.display());
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct CausalSummary {
    method: CausalMethod,
    theta: f64,
    reps: usize,
    coverage: f64,
    mean_estimate: f64,
    mean_se: f64,
    all_hygiene_checked: bool,
}

pub fn run(a: &SimulateArgs, seed: u64) -> CliResult<i32> {
    if let Some(p) = &a.emit_data {
        return emit_dataset(a, p, seed);
    }
    let out = a.out.as_deref();
    let summary = a.summary.as_deref();
    if a.study == Study::SketchStability {
        let form = a
            .form()
            .ok_or_else(|| CliError::Usage("--study sketch-stability needs --dgp fe_linear or fe_nonlinear".into()))?;
        let default = SketchStabilityConfig::default();
        let cfg = SketchStabilityConfig {
            placement: a.placement,
            deltas: if a.delta.is_empty() { default.deltas.clone() } else { a.delta.clone() },
            inner: a.inner.unwrap_or_else(|| a.scale().pick(20, 100)),
            outer: a.reps(20, 150),
            rho: a.rho.first().copied().unwrap_or(default.rho),
            form,
            groups: a.groups,
            per_group: a.per_group,
            seed,
            ..default
        };
        let runs = run_sketch_stability(&cfg)?;
        emit_csv(out, &runs)?;
        write_summary(summary, &relative_impact_default(&runs)?)?;
        return Ok(EXIT_OK);
    }
    match a.dgp {
        DgpKind::ThreeHills => {
            let cfg = ThreeHillsConfig {
                n: a.n.unwrap_or(3000),
                reps: a.reps(20, 50),
                method: a.sketch,
                delta: a.delta.first().copied().unwrap_or(DEFAULT_DELTA),
                seed,
            };
            let records = run_three_hills(&cfg)?;
            emit_csv(out, &records)?;
            write_summary(summary, &summarize(&records, seed))?;
        }
        DgpKind::FeLinear | DgpKind::FeNonlinear => {
            let methods: Vec<FeMethod> = a.parse_methods()?;
            let cfg = FeStudyConfig {
                rhos: if a.rho.is_empty() { FeStudyConfig::default().rhos } else { a.rho.clone() },
                forms: vec![a.form().expect("fe process")],
                methods: if methods.is_empty() { ALL_FE_METHODS.to_vec() } else { methods },
                reps: a.reps(200, 1000),
                groups: a.groups,
                per_group: a.per_group,
                seed,
            };
            let records = run_fe_study(&cfg)?;
            emit_csv(out, &records)?;
            write_summary(summary, &summarize_fe_default(&records))?;
        }
        DgpKind::BivariateCoverage => {
            let methods = a.parse_methods()?;
            let default = CoverageConfig::default();
            let cfg = CoverageConfig {
                n: a.n.unwrap_or(default.n),
                sims: a.reps(50, 200),
                methods: if methods.is_empty() { default.methods.clone() } else { methods },
                seed,
                ..default
            };
            let (records, rows) = run_coverage(&cfg)?;
            emit_csv(out, &records)?;
            write_summary(summary, &rows)?;
        }
        DgpKind::PlrSynthetic => {
            let methods: Vec<CausalMethod> = a.parse_methods()?;
            let method = match methods.as_slice() {
                [] => CausalMethod::DmlPlr,
                [m] => *m,
                _ => return Err(CliError::Usage("plr_synthetic takes a single method".into())),
            };
            let cfg = CausalStudyConfig {
                method,
                n: a.n.unwrap_or(2000),
                theta: a.theta,
                reps: a.reps(100, 1000),
                seed,
                ..CausalStudyConfig::default()
            };
            let records = run_causal_study(&cfg)?;
            emit_csv(out, &records)?;
            write_summary(summary, &causal_summary(&cfg, &records))?;
        }
    }
    Ok(EXIT_OK)
}

fn causal_summary(cfg: &CausalStudyConfig, records: &[CausalRecord]) -> CausalSummary {
    let pick = |f: fn(&CausalRecord) -> f64| mean(&records.iter().map(f).collect::<Vec<_>>());
    CausalSummary {
        method: cfg.method,
        theta: cfg.theta,
        reps: records.len(),
        coverage: pick(|r| if r.covered { 1.0 } else { 0.0 }),
        mean_estimate: pick(|r| r.estimate),
        mean_se: pick(|r| r.se),
        all_hygiene_checked: records.iter().all(|r| r.hygiene_checked),
    }
}
