//! Penalized weighted least squares and PIRLS on a reduced design.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::design::PenalizedDesign;
use crate::error::{GkrlsError, Result};
use crate::family::Family;
use crate::linalg::{dot, mat_t_vec, mat_vec, weighted_cross, weighted_gram, Cholesky};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Link,
    #[default]
    Response,
}

/// Solution of the penalized problem at fixed smoothing parameters.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub family: Family,
    pub lambda: Vec<f64>,
    /// Reduced coefficients `[β, γ_1, …, γ_J]`.
    pub coef: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Prior weights times the Fisher weights at convergence.
    pub working_weights: Vec<f64>,
    /// `AᵀWA + S_λ` in the reduced basis.
    pub hessian: Mat<f64>,
    pub chol: Cholesky,
    pub deviance: f64,
    /// `Σ λ_j ‖γ_j‖²`.
    pub penalty: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized deviance after each PIRLS iteration.
    pub deviance_trace: Vec<f64>,
    pub rank_repairs: usize,
    pub eta_clamped: usize,
}

impl PenalizedFit {
    pub fn penalized_deviance(&self) -> f64 {
        self.deviance + self.penalty
    }

    pub fn log_det_hessian(&self) -> f64 {
        self.chol.log_det()
    }
}

fn check_inputs(design: &PenalizedDesign, y: &[f64], weights: &[f64], lambda: &[f64]) -> Result<()> {
    let n = design.n();
    if y.len() != n || weights.len() != n {
        return Err(GkrlsError::Dimension(format!(
            "design has {n} rows; outcome {} and weights {}",
            y.len(),
            weights.len()
        )));
    }
    if lambda.len() != design.n_blocks() {
        return Err(GkrlsError::Dimension(format!(
            "{} smoothing parameters for {} penalized blocks",
            lambda.len(),
            design.n_blocks()
        )));
    }
    if lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(GkrlsError::InvalidArgument(format!("smoothing parameters {lambda:?}")));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(GkrlsError::InvalidArgument("weights must be positive".into()));
    }
    Ok(())
}

fn block_of(design: &PenalizedDesign, col: usize) -> String {
    if col < design.p {
        return "fixed effects".into();
    }
    design
        .blocks
        .iter()
        .find(|b| col >= b.offset && col < b.offset + b.rank)
        .map(|b| b.label.clone())
        .unwrap_or_else(|| "unknown".into())
}

fn add_diag(g: &mut Mat<f64>, d: &[f64]) {
    for (i, &v) in d.iter().enumerate() {
        g[(i, i)] += v;
    }
}

fn factor(design: &PenalizedDesign, h: MatRef<'_, f64>) -> Result<Cholesky> {
    let ch = Cholesky::new(h).map_err(|_| GkrlsError::Singular {
        block: "penalized system".into(),
    })?;
    if ch.repairs() > 0 {
        let block = ch.first_weak_pivot().map_or("unknown".into(), |c| block_of(design, c));
        log::debug!("ridge added to {} numerically singular pivot(s), first in '{block}'", ch.repairs());
    }
    Ok(ch)
}

/// Sufficient statistics for repeated gaussian solves at different λ.
#[derive(Debug, Clone)]
pub struct GaussianCache {
    pub gram: Mat<f64>,
    pub rhs: Vec<f64>,
    pub ywy: f64,
    pub sum_log_w: f64,
}

impl GaussianCache {
    pub fn new(design: &PenalizedDesign, y: &[f64], weights: &[f64]) -> Self {
        let a = design.matrix.as_ref();
        Self {
            gram: weighted_gram(a, Some(weights)),
            rhs: weighted_cross(a, Some(weights), y),
            ywy: y.iter().zip(weights).map(|(v, w)| w * v * v).sum(),
            sum_log_w: weights.iter().map(|w| w.ln()).sum(),
        }
    }

    /// Coefficients, factor of `H`, and `RSS + penalty` at `lambda`.
    pub fn solve(&self, design: &PenalizedDesign, lambda: &[f64]) -> Result<(Vec<f64>, Cholesky, f64)> {
        let mut h = self.gram.clone();
        add_diag(&mut h, &design.penalty_diag(lambda));
        let ch = factor(design, h.as_ref())?;
        let coef = ch.solve_vec(&self.rhs);
        // yᵀWy − 2cᵀb + cᵀHc = yᵀWy − cᵀb at the solution
        let q = (self.ywy - dot(&coef, &self.rhs)).max(0.0);
        Ok((coef, ch, q))
    }
}

/// Gaussian penalized weighted least squares at fixed λ.
pub fn solve_penalized(
    design: &PenalizedDesign,
    y: &[f64],
    weights: &[f64],
    lambda: &[f64],
) -> Result<PenalizedFit> {
    check_inputs(design, y, weights, lambda)?;
    let cache = GaussianCache::new(design, y, weights);
    gaussian_fit_from_cache(design, &cache, y, weights, lambda)
}

pub(crate) fn gaussian_fit_from_cache(
    design: &PenalizedDesign,
    cache: &GaussianCache,
    y: &[f64],
    weights: &[f64],
    lambda: &[f64],
) -> Result<PenalizedFit> {
    let pen = design.penalty_diag(lambda);
    let mut h = cache.gram.clone();
    add_diag(&mut h, &pen);
    let ch = factor(design, h.as_ref())?;
    let coef = ch.solve_vec(&cache.rhs);
    let eta = mat_vec(design.matrix.as_ref(), &coef);
    let deviance: f64 = (0..y.len()).map(|i| weights[i] * (y[i] - eta[i]).powi(2)).sum();
    let penalty: f64 = coef.iter().zip(&pen).map(|(c, l)| l * c * c).sum();
    Ok(PenalizedFit {
        family: Family::Gaussian,
        lambda: lambda.to_vec(),
        mu: eta.clone(),
        eta,
        working_weights: weights.to_vec(),
        hessian: h,
        rank_repairs: ch.repairs(),
        chol: ch,
        coef,
        deviance,
        penalty,
        iterations: 1,
        converged: true,
        deviance_trace: vec![deviance + penalty],
        eta_clamped: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PirlsOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

const MAX_HALVINGS: usize = 10;

/// Penalized IRLS for any family; gaussian reduces to one direct solve.
///
/// `eta_start` warm-starts the linear predictor (otherwise the family's
/// transform of `y` is used).
pub fn pirls(
    design: &PenalizedDesign,
    y: &[f64],
    weights: &[f64],
    lambda: &[f64],
    family: Family,
    opts: &PirlsOptions,
    eta_start: Option<&[f64]>,
) -> Result<PenalizedFit> {
    check_inputs(design, y, weights, lambda)?;
    family.validate(y)?;
    if family.is_gaussian() {
        return solve_penalized(design, y, weights, lambda);
    }
    let a = design.matrix.as_ref();
    let n = design.n();
    let pen = design.penalty_diag(lambda);
    let pdev = |coef: &[f64], eta: &[f64]| -> f64 {
        family.deviance(y, eta, weights) + coef.iter().zip(&pen).map(|(c, l)| l * c * c).sum::<f64>()
    };
    let mut clamped = 0usize;
    let linpred = |coef: &[f64], clamped: &mut usize| -> Vec<f64> {
        mat_vec(a, coef)
            .into_iter()
            .map(|e| {
                let (v, c) = family.clamp_eta(e);
                *clamped += c as usize;
                v
            })
            .collect()
    };
    let mut eta: Vec<f64> = match eta_start {
        Some(e) if e.len() == n => e.to_vec(),
        _ => y.iter().map(|&v| family.link(family.init_mu(v))).collect(),
    };
    let mut coef_old: Option<Vec<f64>> = None;
    let mut pdev_old = f64::INFINITY;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut repairs = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mu = family.linkinv(eta[i]);
            let d = family.mu_eta(eta[i]).max(1e-300);
            let v = family.variance(mu).max(1e-300);
            w[i] = (weights[i] * d * d / v).max(1e-300);
            z[i] = eta[i] + (y[i] - mu) / d;
        }
        let mut h = weighted_gram(a, Some(&w));
        add_diag(&mut h, &pen);
        let ch = factor(design, h.as_ref())?;
        repairs = repairs.max(ch.repairs());
        let mut coef = ch.solve_vec(&weighted_cross(a, Some(&w), &z));
        let mut eta_new = linpred(&coef, &mut clamped);
        let mut pdev_new = pdev(&coef, &eta_new);
        if let Some(old) = &coef_old {
            let mut halvings = 0;
            while !(pdev_new <= pdev_old + 1e-10 * pdev_old.abs()) && halvings < MAX_HALVINGS {
                for (c, o) in coef.iter_mut().zip(old) {
                    *c = 0.5 * (*c + o);
                }
                eta_new = linpred(&coef, &mut clamped);
                pdev_new = pdev(&coef, &eta_new);
                halvings += 1;
            }
            if !(pdev_new <= pdev_old + 1e-10 * pdev_old.abs()) {
                // no descent even after halving: keep the previous iterate
                log::warn!("PIRLS step halving failed at iteration {it}");
                break;
            }
        }
        if !pdev_new.is_finite() {
            return Err(GkrlsError::Convergence("non-finite penalized deviance".into()));
        }
        trace.push(pdev_new);
        let rel = (pdev_new - pdev_old).abs() / (pdev_new.abs() + 0.1);
        coef_old = Some(coef);
        eta = eta_new;
        pdev_old = pdev_new;
        if rel < opts.tol {
            converged = true;
            break;
        }
    }
    let coef = coef_old.ok_or_else(|| GkrlsError::Convergence("PIRLS made no progress".into()))?;
    if clamped > 0 {
        log::warn!("linear predictor clamped at ±{} ({clamped} times); possible separation", crate::family::ETA_CLAMP);
    }
    // Hessian at the final iterate
    let mu: Vec<f64> = eta.iter().map(|&e| family.linkinv(e)).collect();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let d = family.mu_eta(eta[i]);
            (weights[i] * d * d / family.variance(mu[i]).max(1e-300)).max(1e-300)
        })
        .collect();
    let mut h = weighted_gram(a, Some(&w));
    add_diag(&mut h, &pen);
    let ch = factor(design, h.as_ref())?;
    let deviance = family.deviance(y, &eta, weights);
    let penalty: f64 = coef.iter().zip(&pen).map(|(c, l)| l * c * c).sum();
    Ok(PenalizedFit {
        family,
        lambda: lambda.to_vec(),
        coef,
        eta,
        mu,
        working_weights: w,
        hessian: h,
        rank_repairs: repairs.max(ch.repairs()),
        chol: ch,
        deviance,
        penalty,
        iterations,
        converged,
        deviance_trace: trace,
        eta_clamped: clamped,
    })
}

/// Predictions from reduced coefficients and reduced design rows.
pub fn predict(coef: &[f64], rows: MatRef<'_, f64>, family: Family, scale: Scale) -> Result<Vec<f64>> {
    if rows.ncols() != coef.len() {
        return Err(GkrlsError::Dimension(format!(
            "design rows have {} columns for {} coefficients",
            rows.ncols(),
            coef.len()
        )));
    }
    let eta = mat_vec(rows, coef);
    Ok(match scale {
        Scale::Link => eta,
        Scale::Response => eta.into_iter().map(|e| family.linkinv(e)).collect(),
    })
}

/// Gradient of `deviance/2 + penalty/2` with respect to the reduced coefficients.
pub fn objective_gradient(
    design: &PenalizedDesign,
    y: &[f64],
    weights: &[f64],
    lambda: &[f64],
    family: Family,
    coef: &[f64],
) -> Vec<f64> {
    let eta = mat_vec(design.matrix.as_ref(), coef);
    let score: Vec<f64> = (0..y.len())
        .map(|i| {
            let mu = family.linkinv(eta[i]);
            weights[i] * (y[i] - mu) * family.mu_eta(eta[i]) / family.variance(mu)
        })
        .collect();
    let g = mat_t_vec(design.matrix.as_ref(), &score);
    let pen = design.penalty_diag(lambda);
    g.iter().zip(coef).zip(&pen).map(|((g, c), l)| l * c - g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, KernelDefaults};
    use crate::data::Dataset;
    use crate::spec::parse_spec;

    fn intercept_design(n: usize) -> PenalizedDesign {
        PenalizedDesign {
            matrix: Mat::from_fn(n, 1, |_, _| 1.0),
            p: 1,
            blocks: vec![],
        }
    }

    #[test]
    fn binomial_intercept_is_logit_of_mean() {
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let d = intercept_design(8);
        let f = pirls(&d, &y, &[1.0; 8], &[], Family::BinomialLogit, &PirlsOptions::default(), None).unwrap();
        assert!(f.converged);
        assert!((f.coef[0] - (0.25f64 / 0.75).ln()).abs() < 1e-8);
        assert!((f.coef[0] + 1.098612).abs() < 1e-6);
    }

    #[test]
    fn poisson_intercept_is_log_mean() {
        let y = [2.0, 6.0, 4.0, 3.0, 5.0];
        let d = intercept_design(5);
        let f = pirls(&d, &y, &[1.0; 5], &[], Family::PoissonLog, &PirlsOptions::default(), None).unwrap();
        assert!((f.coef[0] - 4f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn deviance_trace_is_monotone() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).sin() * 2.0).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| ((v + 0.3 * (i % 3) as f64) > 0.2) as u8 as f64).collect();
        let d = Dataset::builder("y", y.clone()).numeric("x", x).build().unwrap();
        let (pd, _, _) = build_design(&d, &parse_spec("y ~ kernel(x; sketch=none)").unwrap(), &KernelDefaults::default(), 1).unwrap();
        let f = pirls(&pd, &y, &vec![1.0; n], &[0.5], Family::BinomialLogit, &PirlsOptions::default(), None).unwrap();
        assert!(f.converged);
        for w in f.deviance_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs());
        }
        let g = objective_gradient(&pd, &y, &vec![1.0; n], &[0.5], Family::BinomialLogit, &f.coef);
        let obj = 0.5 * f.penalized_deviance();
        assert!(g.iter().all(|v| v.abs() < 1e-6 * (1.0 + obj)));
    }

    #[test]
    fn predict_scales() {
        let rows = Mat::from_fn(2, 2, |i, j| (i + j) as f64);
        let c = [0.5, -1.0];
        let link = predict(&c, rows.as_ref(), Family::BinomialLogit, Scale::Link).unwrap();
        let resp = predict(&c, rows.as_ref(), Family::BinomialLogit, Scale::Response).unwrap();
        for (e, p) in link.iter().zip(&resp) {
            assert!((p - 1.0 / (1.0 + (-e).exp())).abs() < 1e-15);
        }
        let g1 = predict(&c, rows.as_ref(), Family::Gaussian, Scale::Link).unwrap();
        let g2 = predict(&c, rows.as_ref(), Family::Gaussian, Scale::Response).unwrap();
        assert_eq!(g1, g2);
        assert!(predict(&[1.0], rows.as_ref(), Family::Gaussian, Scale::Link).is_err());
    }
}
