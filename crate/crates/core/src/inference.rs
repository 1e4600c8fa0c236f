//! Coefficient covariance estimators.
//!
//! All estimators are computed for the reduced coefficients and mapped to
//! `(β, α)` on demand through the design's expansion matrix.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::design::{DesignRecipe, PenalizedDesign, TermRecipe};
use crate::error::{GkrlsError, Result};
use crate::kernel::SketchMethod;
use crate::linalg::{symmetrize, sym_eigen, weighted_gram};
use crate::solver::PenalizedFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Bayes,
    FreqWood,
    HhLegacy,
    RobustHc,
    ClusterRobust,
}

/// User-facing choice of standard errors.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    #[default]
    Bayes,
    Robust,
    Cluster(String),
}

impl std::str::FromStr for SeKind {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(SeKind::Bayes),
            "robust" | "hc" => Ok(SeKind::Robust),
            _ => match s.strip_prefix("cluster:") {
                Some(c) if !c.is_empty() => Ok(SeKind::Cluster(c.to_string())),
                _ => Err(GkrlsError::InvalidArgument(format!(
                    "unknown standard-error kind '{s}' (bayes, robust, cluster:COLUMN)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for SeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeKind::Bayes => f.write_str("bayes"),
            SeKind::Robust => f.write_str("robust"),
            SeKind::Cluster(c) => write!(f, "cluster:{c}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub kind: VarianceKind,
    /// Covariance of the reduced coefficients.
    pub reduced: Mat<f64>,
    pub n_clusters: Option<usize>,
    /// Finite-sample factor applied to the meat (1 when none).
    pub correction: f64,
    pub warnings: Vec<String>,
}

impl VarianceEstimate {
    /// Covariance of `(β, α_1, …, α_J)`.
    pub fn full(&self, design: &PenalizedDesign) -> Mat<f64> {
        let t = design.expansion_matrix();
        let mut v = &t * &self.reduced * t.transpose();
        symmetrize(&mut v);
        v
    }

    /// `cᵀ V c` for a contrast on the reduced coefficients.
    pub fn quad_form(&self, c: &[f64]) -> f64 {
        let k = c.len();
        let mut s = 0.0;
        for j in 0..k {
            if c[j] == 0.0 {
                continue;
            }
            let mut t = 0.0;
            for i in 0..k {
                t += self.reduced[(i, j)] * c[i];
            }
            s += t * c[j];
        }
        s
    }
}

/// Smallest eigenvalue relative to the largest magnitude (PSD diagnostic).
pub fn min_relative_eigen(m: &Mat<f64>) -> Result<f64> {
    let e = sym_eigen(m.as_ref())?;
    let top = e.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if top == 0.0 {
        return Ok(0.0);
    }
    Ok(e.values.last().copied().unwrap_or(0.0) / top)
}

fn sandwich(hinv: &Mat<f64>, meat: &Mat<f64>) -> Mat<f64> {
    let mut v = hinv * meat * hinv;
    symmetrize(&mut v);
    v
}

/// Per-row score factors `u_i` so that the score vector of row `i` is `u_i·a_i`.
pub fn score_factors(fit: &PenalizedFit, y: &[f64], prior_weights: &[f64]) -> Vec<f64> {
    let fam = fit.family;
    (0..y.len())
        .map(|i| {
            let mu = fit.mu[i];
            prior_weights[i] * (y[i] - mu) * fam.mu_eta(fit.eta[i]) / fam.variance(mu).max(1e-300)
        })
        .collect()
}

/// `V_B = σ²H⁻¹` (scale 1 for non-gaussian families).
pub fn variance_bayes(fit: &PenalizedFit, scale: f64) -> Result<VarianceEstimate> {
    let s = if fit.family.is_gaussian() { scale } else { 1.0 };
    let mut v = fit.chol.inverse();
    for x in v.col_iter_mut() {
        for e in x.iter_mut() {
            *e *= s;
        }
    }
    Ok(VarianceEstimate {
        kind: VarianceKind::Bayes,
        reduced: v,
        n_clusters: None,
        correction: 1.0,
        warnings: vec![],
    })
}

/// Meat of the frequentist sandwich.
#[derive(Debug, Clone, Copy)]
pub enum Meat<'a> {
    /// Model-based: `σ²·AᵀWA`.
    Model { scale: f64 },
    /// Squared score contributions.
    Hc,
    /// Cluster-summed scores with factor `G/(G−1)`; codes index clusters.
    Cluster(&'a [usize]),
}

/// `V_F = H⁻¹·meat·H⁻¹`.
pub fn variance_freq(
    fit: &PenalizedFit,
    design: &PenalizedDesign,
    y: &[f64],
    prior_weights: &[f64],
    meat: Meat<'_>,
) -> Result<VarianceEstimate> {
    let a = design.matrix.as_ref();
    let n = a.nrows();
    if y.len() != n || prior_weights.len() != n {
        return Err(GkrlsError::Dimension("outcome/weights length differs from design rows".into()));
    }
    let hinv = fit.chol.inverse();
    let mut warnings = Vec::new();
    let (kind, m, n_clusters, correction) = match meat {
        Meat::Model { scale } => {
            let s = if fit.family.is_gaussian() { scale } else { 1.0 };
            let mut g = weighted_gram(a, Some(&fit.working_weights));
            for c in g.col_iter_mut() {
                for e in c.iter_mut() {
                    *e *= s;
                }
            }
            (VarianceKind::FreqWood, g, None, 1.0)
        }
        Meat::Hc => {
            let u = score_factors(fit, y, prior_weights);
            if u.iter().all(|v| v.abs() < 1e-300) {
                warnings.push("all residuals are zero; the robust meat is degenerate".into());
                log::warn!("all residuals are zero; the robust meat is degenerate");
            }
            let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
            (VarianceKind::RobustHc, weighted_gram(a, Some(&u2)), None, 1.0)
        }
        Meat::Cluster(codes) => {
            if codes.len() != n {
                return Err(GkrlsError::Dimension("cluster codes length differs from design rows".into()));
            }
            let g = codes.iter().copied().max().map_or(0, |m| m + 1);
            let present: Vec<bool> = {
                let mut p = vec![false; g];
                for &c in codes {
                    p[c] = true;
                }
                p
            };
            let gcount = present.iter().filter(|&&b| b).count();
            if gcount < 2 {
                return Err(GkrlsError::InvalidArgument("cluster-robust variance needs at least two clusters".into()));
            }
            let u = score_factors(fit, y, prior_weights);
            let k = a.ncols();
            let mut sums = Mat::<f64>::zeros(g, k);
            for i in 0..n {
                let c = codes[i];
                for j in 0..k {
                    sums[(c, j)] += u[i] * a[(i, j)];
                }
            }
            let factor = gcount as f64 / (gcount as f64 - 1.0);
            let mut m = sums.transpose() * &sums;
            for c in m.col_iter_mut() {
                for e in c.iter_mut() {
                    *e *= factor;
                }
            }
            (VarianceKind::ClusterRobust, m, Some(gcount), factor)
        }
    };
    Ok(VarianceEstimate {
        kind,
        reduced: sandwich(&hinv, &m),
        n_clusters,
        correction,
        warnings,
    })
}

/// Legacy estimator, defined only for one unsketched kernel term; it equals
/// the model-meat sandwich in that configuration.
pub fn variance_hh(
    fit: &PenalizedFit,
    design: &PenalizedDesign,
    recipe: &DesignRecipe,
    y: &[f64],
    prior_weights: &[f64],
    scale: f64,
) -> Result<VarianceEstimate> {
    let ok = recipe.terms.len() == 1
        && matches!(&recipe.terms[0], TermRecipe::Kernel { plan, .. } if plan.method == SketchMethod::None);
    if !ok {
        return Err(GkrlsError::InvalidArgument(
            "the legacy variance is defined only for a single unsketched kernel term".into(),
        ));
    }
    let mut v = variance_freq(fit, design, y, prior_weights, Meat::Model { scale })?;
    v.kind = VarianceKind::HhLegacy;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_kind_parsing() {
        assert_eq!("bayes".parse::<SeKind>().unwrap(), SeKind::Bayes);
        assert_eq!("cluster:state".parse::<SeKind>().unwrap(), SeKind::Cluster("state".into()));
        assert!("cluster:".parse::<SeKind>().is_err());
        assert_eq!(SeKind::Cluster("g".into()).to_string(), "cluster:g");
    }

    #[test]
    fn quad_form_matches_product() {
        let v = VarianceEstimate {
            kind: VarianceKind::Bayes,
            reduced: Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.5 }),
            n_clusters: None,
            correction: 1.0,
            warnings: vec![],
        };
        let c = [1.0, -1.0, 2.0];
        // 2(1+1+4) + 2·0.5(−1 + 2 − 2)
        assert!((v.quad_form(&c) - 11.0).abs() < 1e-12);
    }
}
