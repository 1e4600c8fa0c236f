//! Simulation studies for gkrls: data-generating processes, replicate
//! drivers, bootstrap summaries and tidy CSV/JSON output.

pub mod causal;
pub mod coverage;
pub mod dgp;
pub mod fe;
pub mod output;
pub mod scaling;
pub mod sketch;
pub mod stats;
pub mod three_hills;

use std::time::Instant;

use gkrls_core::data::Dataset;
use gkrls_core::effects::{ame, EffectOptions};
use gkrls_core::model::FittedModel;
use gkrls_core::Result;

/// Run `f` and return its value with the elapsed wall-clock seconds.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

/// Average marginal effect point estimate (no standard error needed by the studies).
pub fn ame_point(model: &FittedModel, data: &Dataset, variable: &str) -> Result<f64> {
    Ok(ame(model, data, variable, &EffectOptions::default())?.estimate[0])
}

/// Replicate counts used when no explicit count is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Reduced counts that finish on a desktop.
    Desk,
    /// The counts of the original study design.
    Full,
}

impl Scale {
    pub fn pick(self, desk: usize, full: usize) -> usize {
        match self {
            Scale::Desk => desk,
            Scale::Full => full,
        }
    }
}
