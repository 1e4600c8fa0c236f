use std::path::PathBuf;

use clap::Args;
use gkrls_simlab::coverage::{run_coverage, CoverageConfig, CoverageMethod};
use gkrls_simlab::Scale;
use serde::Serialize;

use crate::{emit_csv, CliResult, EXIT_OK};

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    /// Simulated data sets; 50 by default, 200 with --full-scale.
    #[arg(long)]
    pub sims: Option<usize>,
    /// Observations per data set.
    #[arg(long, default_value_t = 250)]
    pub n: usize,
    /// Evaluation grid points per side.
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
    /// Methods (comma separated): unsketched_hh, unsketched_bayes, gkrls_bayes, gkrls_linear_bayes.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<CoverageMethod>,
    #[arg(long)]
    pub full_scale: bool,
    /// Summary table CSV (one row per method); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-simulation records CSV.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

pub fn run(a: &CoverageArgs, seed: u64) -> CliResult<i32> {
    let scale = if a.full_scale { Scale::Full } else { Scale::Desk };
    let default = CoverageConfig::default();
    let cfg = CoverageConfig {
        n: a.n,
        sims: a.sims.unwrap_or_else(|| scale.pick(50, 200)),
        grid: a.grid,
        methods: if a.methods.is_empty() { default.methods } else { a.methods.clone() },
        seed,
    };
    let (records, rows) = run_coverage(&cfg)?;
    if let Some(p) = &a.records {
        emit_csv(Some(p), &records)?;
    }
    for r in &rows {
        if r.failures > 0 {
            log::warn!("{}: {} failed fits excluded", r.method.name(), r.failures);
        }
    }
    emit_csv(a.out.as_deref(), &rows)?;
    Ok(EXIT_OK)
}
