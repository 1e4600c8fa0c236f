use std::path::PathBuf;

use clap::{Args, ValueEnum};
use gkrls_core::kernel::{SketchMethod, DEFAULT_DELTA};
use gkrls_simlab::scaling::{run_scaling, slopes, ScalingConfig, SlopeFit};
use gkrls_simlab::stats::log_grid;
use gkrls_simlab::Scale;
use serde::Serialize;

use crate::{emit_csv, emit_json, CliError, CliResult, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stages {
    /// Estimation only.
    Estimation,
    /// Estimation, prediction and marginal effects.
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Sample sizes as lo:hi[:k], k log-spaced points (default 5).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value = "subsample")]
    pub sketch: SketchMethod,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    /// Replicates per sample size; 1 by default, 50 with --full-scale.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_enum, default_value = "all")]
    pub stages: Stages,
    #[arg(long)]
    pub full_scale: bool,
    /// Timing records CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Slope fits JSON; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// `lo:hi[:k]` → k log-spaced integer sample sizes.
pub fn parse_size_grid(text: &str) -> CliResult<Vec<usize>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || CliError::Usage(format!("grid '{text}' is not lo:hi[:k]"));
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let k: usize = match parts.get(2) {
        Some(s) => s.trim().parse().map_err(|_| bad())?,
        None => 5,
    };
    if !(lo >= 2.0 && hi > lo && k >= 2) {
        return Err(bad());
    }
    Ok(log_grid(lo, hi, k))
}

#[derive(Debug, Serialize)]
struct BenchReport<'a> {
    slopes: &'a [SlopeFit],
    config: &'a ScalingConfig,
}

pub fn run(a: &BenchArgs, seed: u64) -> CliResult<i32> {
    let scale = if a.full_scale { Scale::Full } else { Scale::Desk };
    let grid = a.grid.clone().unwrap_or_else(|| match scale {
        Scale::Desk => "1e3:1e4:4".to_string(),
        Scale::Full => "1e4:1e5:10".to_string(),
    });
    let cfg = ScalingConfig {
        ns: parse_size_grid(&grid)?,
        method: a.sketch,
        delta: a.delta,
        reps: a.reps.unwrap_or_else(|| scale.pick(1, 50)),
        all_stages: a.stages == Stages::All,
        seed,
    };
    let records = run_scaling(&cfg)?;
    if let Some(p) = &a.out {
        emit_csv(Some(p), &records)?;
    }
    let fits = slopes(&records);
    for f in &fits {
        log::info!("{:?} slope {:.3} over N in [{}, {}]", f.stage, f.slope, f.n_min, f.n_max);
    }
    emit_json(a.report.as_deref(), &BenchReport { slopes: &fits, config: &cfg })?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_grid_forms() {
        assert_eq!(parse_size_grid("1e3:1e5:3").unwrap(), vec![1000, 10_000, 100_000]);
        assert_eq!(parse_size_grid("100:1e4").unwrap().len(), 5);
        for bad in ["1e3", "1e5:1e3", "1e3:1e4:1", "a:b", "1:2:3:4"] {
            assert!(parse_size_grid(bad).is_err(), "{bad}");
        }
    }
}
