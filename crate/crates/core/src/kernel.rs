//! Gaussian kernel evaluation, sketch plans and kernel design blocks.
//!
//! A kernel term over standardized covariates `w` contributes the design
//! `K*` (N×M) and penalty `P` (M×M):
//!
//! * `none`: `K*` is the full N×N kernel and `P = K`.
//! * `subsample`: `K*` holds kernel entries against M sampled rows and `P` is
//!   the kernel among the sampled rows. No N×N matrix is formed.
//! * `gaussian`: `K* = K·Sᵀ` and `P = S·K·Sᵀ` for a dense M×N sketch `S` with
//!   i.i.d. normal entries of standard deviation `1/√M`. This materializes
//!   the full kernel (O(N²) memory) and prediction needs every training row.

use faer::{Mat, MatRef};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StandardizationTransform;
use crate::error::{GkrlsError, Result};
use crate::linalg::{all_finite, from_row_major, to_row_major};
use crate::rng;

pub const DEFAULT_DELTA: f64 = 5.0;
pub const DEFAULT_DENSE_CAP: usize = 20_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchMethod {
    None,
    #[default]
    Subsample,
    Gaussian,
}

impl std::str::FromStr for SketchMethod {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "subsample" => Ok(Self::Subsample),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(GkrlsError::InvalidArgument(format!("unknown sketch method '{s}'"))),
        }
    }
}

impl std::fmt::Display for SketchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Subsample => "subsample",
            Self::Gaussian => "gaussian",
        })
    }
}

#[inline]
fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(−‖u−v‖²/b)`.
pub fn kernel_entry(u: &[f64], v: &[f64], bandwidth: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GkrlsError::Dimension(format!(
            "kernel arguments of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(GkrlsError::InvalidArgument(format!("bandwidth {bandwidth}")));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(GkrlsError::InvalidArgument("non-finite kernel input".into()));
    }
    Ok((-sq_dist(u, v) / bandwidth).exp())
}

/// The bandwidth equals the rank of the standardized inputs.
pub fn default_bandwidth(t: &StandardizationTransform) -> f64 {
    t.rank as f64
}

/// `floor(δ·N^(1/3))` clamped to `[2, N]`.
pub fn sketch_dimension(n: usize, delta: f64) -> usize {
    let m = (delta * (n as f64).cbrt() + 1e-9).floor();
    (m.max(2.0) as usize).min(n)
}

/// Resolved sketch for one kernel term.
#[derive(Debug, Clone)]
pub struct SketchPlan {
    pub method: SketchMethod,
    pub delta: f64,
    pub dimension: usize,
    pub seed: u64,
    pub n: usize,
    /// Sampled rows (0-based, ascending) for subsampling.
    pub indices: Option<Vec<usize>>,
    /// M×N sketch matrix for gaussian sketching.
    pub coefficients: Option<Mat<f64>>,
}

/// JSON-friendly summary of a plan (coefficients omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchPlanSummary {
    pub method: SketchMethod,
    pub delta: f64,
    pub dimension: usize,
    pub seed: u64,
    pub indices: Option<Vec<usize>>,
}

impl SketchPlan {
    pub fn summary(&self) -> SketchPlanSummary {
        SketchPlanSummary {
            method: self.method,
            delta: self.delta,
            dimension: self.dimension,
            seed: self.seed,
            indices: self.indices.clone(),
        }
    }
}

pub fn make_sketch_plan(
    n: usize,
    method: SketchMethod,
    delta: f64,
    seed: u64,
    override_m: Option<usize>,
) -> Result<SketchPlan> {
    if n < 2 {
        return Err(GkrlsError::InvalidArgument(format!("sketch needs N >= 2, got {n}")));
    }
    let dimension = match (method, override_m) {
        (SketchMethod::None, _) => n,
        (_, Some(m)) => {
            if m > n {
                return Err(GkrlsError::InvalidArgument(format!(
                    "sketch size {m} exceeds N = {n}"
                )));
            }
            if m == 0 {
                return Err(GkrlsError::InvalidArgument("sketch size 0".into()));
            }
            m
        }
        (_, None) => {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(GkrlsError::InvalidArgument(format!("sketch multiplier {delta}")));
            }
            sketch_dimension(n, delta)
        }
    };
    let mut r = rng::seeded(seed);
    let (indices, coefficients) = match method {
        SketchMethod::None => (None, None),
        SketchMethod::Subsample => {
            let mut idx = sample(&mut r, n, dimension).into_vec();
            idx.sort_unstable();
            (Some(idx), None)
        }
        SketchMethod::Gaussian => {
            let sd = 1.0 / (dimension as f64).sqrt();
            let mut s = Mat::zeros(dimension, n);
            for j in 0..n {
                for i in 0..dimension {
                    let z: f64 = StandardNormal.sample(&mut r);
                    s[(i, j)] = sd * z;
                }
            }
            (None, Some(s))
        }
    };
    Ok(SketchPlan {
        method,
        delta,
        dimension,
        seed,
        n,
        indices,
        coefficients,
    })
}

/// Guard against dense N×N kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelOptions {
    pub dense_cap: usize,
    pub force_dense: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            dense_cap: DEFAULT_DENSE_CAP,
            force_dense: false,
        }
    }
}

/// Everything needed to evaluate the kernel design at new standardized rows.
#[derive(Debug, Clone)]
pub struct KernelPredictor {
    pub method: SketchMethod,
    pub bandwidth: f64,
    /// Standardized rows the kernel is evaluated against: the M sampled rows
    /// (subsample) or all N training rows (none, gaussian).
    pub reference: Mat<f64>,
    /// M×N sketch matrix (gaussian only).
    pub projection: Option<Mat<f64>>,
}

/// Design and penalty for one kernel term.
#[derive(Debug, Clone)]
pub struct KernelBlock {
    pub design: Mat<f64>,
    pub penalty: Mat<f64>,
    pub predictor: KernelPredictor,
}

impl KernelBlock {
    pub fn bandwidth(&self) -> f64 {
        self.predictor.bandwidth
    }
}

/// Pairwise kernel entries between the rows of `a` and the rows of `b`.
pub fn kernel_matrix(a: MatRef<'_, f64>, b: MatRef<'_, f64>, bandwidth: f64) -> Mat<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let d = a.ncols();
    let ra = to_row_major(a);
    let rb = to_row_major(b);
    let m = b.nrows();
    let mut out = vec![0.0; a.nrows() * m];
    out.par_chunks_mut(m.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let u = &ra[i * d..(i + 1) * d];
            for (k, o) in row.iter_mut().enumerate() {
                *o = (-sq_dist(u, &rb[k * d..(k + 1) * d]) / bandwidth).exp();
            }
        });
    if m == 0 {
        return Mat::zeros(a.nrows(), 0);
    }
    from_row_major(a.nrows(), m, &out)
}

fn check_dense(n: usize, opts: &KernelOptions) -> Result<()> {
    if n > opts.dense_cap && !opts.force_dense {
        return Err(GkrlsError::MemoryGuard {
            n,
            cap: opts.dense_cap,
        });
    }
    Ok(())
}

pub fn build_kernel_block(
    wstd: MatRef<'_, f64>,
    plan: &SketchPlan,
    bandwidth: f64,
    opts: &KernelOptions,
) -> Result<KernelBlock> {
    let n = wstd.nrows();
    if plan.n != n {
        return Err(GkrlsError::Dimension(format!(
            "sketch plan for N={} applied to {} rows",
            plan.n, n
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(GkrlsError::InvalidArgument(format!("bandwidth {bandwidth}")));
    }
    if !all_finite(wstd) {
        return Err(GkrlsError::InvalidArgument("non-finite kernel input".into()));
    }
    match plan.method {
        SketchMethod::None => {
            check_dense(n, opts)?;
            let k = kernel_matrix(wstd, wstd, bandwidth);
            Ok(KernelBlock {
                penalty: k.clone(),
                design: k,
                predictor: KernelPredictor {
                    method: SketchMethod::None,
                    bandwidth,
                    reference: wstd.to_owned(),
                    projection: None,
                },
            })
        }
        SketchMethod::Subsample => {
            let idx = plan
                .indices
                .as_ref()
                .ok_or_else(|| GkrlsError::InvalidArgument("subsample plan without indices".into()))?;
            let reference = Mat::from_fn(idx.len(), wstd.ncols(), |i, j| wstd[(idx[i], j)]);
            let design = kernel_matrix(wstd, reference.as_ref(), bandwidth);
            let penalty = Mat::from_fn(idx.len(), idx.len(), |i, j| design[(idx[i], j)]);
            Ok(KernelBlock {
                design,
                penalty,
                predictor: KernelPredictor {
                    method: SketchMethod::Subsample,
                    bandwidth,
                    reference,
                    projection: None,
                },
            })
        }
        SketchMethod::Gaussian => {
            check_dense(n, opts)?;
            let s = plan
                .coefficients
                .as_ref()
                .ok_or_else(|| GkrlsError::InvalidArgument("gaussian plan without coefficients".into()))?;
            let k = kernel_matrix(wstd, wstd, bandwidth);
            let design = &k * s.transpose();
            drop(k);
            let mut penalty = s * &design;
            crate::linalg::symmetrize(&mut penalty);
            Ok(KernelBlock {
                design,
                penalty,
                predictor: KernelPredictor {
                    method: SketchMethod::Gaussian,
                    bandwidth,
                    reference: wstd.to_owned(),
                    projection: Some(s.clone()),
                },
            })
        }
    }
}

/// Kernel design rows for new standardized inputs.
pub fn kernel_predict_design(wnew: MatRef<'_, f64>, predictor: &KernelPredictor) -> Result<Mat<f64>> {
    if wnew.ncols() != predictor.reference.ncols() {
        return Err(GkrlsError::Dimension(format!(
            "kernel inputs have {} columns, expected {}",
            wnew.ncols(),
            predictor.reference.ncols()
        )));
    }
    if !all_finite(wnew) {
        return Err(GkrlsError::InvalidArgument("non-finite kernel input".into()));
    }
    let k = kernel_matrix(wnew, predictor.reference.as_ref(), predictor.bandwidth);
    Ok(match &predictor.projection {
        Some(s) => &k * s.transpose(),
        None => k,
    })
}
