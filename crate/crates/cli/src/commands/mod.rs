pub mod bench;
pub mod causal;
pub mod coverage;
pub mod effects;
pub mod fit;
pub mod predict;
pub mod simulate;

use clap::Args;
use gkrls_core::data::StandardizeKind;
use gkrls_core::design::KernelDefaults;
use gkrls_core::kernel::{KernelOptions, SketchMethod, DEFAULT_DELTA};
use serde::Serialize;

/// Defaults for kernel terms that do not set their own options.
#[derive(Debug, Clone, Args, Serialize)]
pub struct KernelArgs {
    /// Sketch for kernel terms: none, subsample or gaussian.
    #[arg(long, default_value = "subsample")]
    pub sketch: SketchMethod,
    /// Sketch multiplier; the sketch dimension is floor(delta * N^(1/3)).
    #[arg(long, default_value_t = DEFAULT_DELTA, conflicts_with = "sketch_size")]
    pub delta: f64,
    /// Explicit sketch dimension.
    #[arg(long)]
    pub sketch_size: Option<usize>,
    /// Standardization of kernel inputs: none, scale or mahalanobis.
    #[arg(long, default_value = "mahalanobis")]
    pub standardize: StandardizeKind,
    /// Allow dense N x N kernels above the memory guard.
    #[arg(long)]
    pub force_dense: bool,
}

impl KernelArgs {
    pub fn defaults(&self) -> KernelDefaults {
        KernelDefaults {
            method: self.sketch,
            delta: self.delta,
            size: self.sketch_size,
            standardize: self.standardize,
            options: KernelOptions {
                force_dense: self.force_dense,
                ..KernelOptions::default()
            },
        }
    }
}
