//! Restricted likelihood (Laplace for non-gaussian families) and GCV
//! smoothing-parameter selection over `ρ = log λ`.

use std::cell::RefCell;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::design::PenalizedDesign;
use crate::error::{GkrlsError, Result};
use crate::family::Family;
use crate::linalg::{dot, sym_eigen, Cholesky};
use crate::optim::{minimize, MinimizeOptions};
use crate::solver::{gaussian_fit_from_cache, pirls, GaussianCache, PenalizedFit, PirlsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the gaussian scale enters the criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleChoice {
    /// Replace σ² by its maximizer `(RSS + penalty)/(N − p)`.
    Profile,
    Fixed(f64),
}

/// Smoothing-parameter selection rule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "lambda")]
pub enum Smoothing {
    #[default]
    Reml,
    Gcv,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionValue {
    pub value: f64,
    pub scale: f64,
    /// `Σ_j r_j log λ_j` (reduced basis).
    pub log_det_penalty: f64,
    pub log_det_hessian: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcvValue {
    pub score: f64,
    pub edf: f64,
    pub rss: f64,
}

/// Single-block gaussian shortcut: eigen-decomposition of the Schur
/// complement of the fixed block makes every λ evaluation O(r).
#[derive(Debug, Clone)]
struct Spectral {
    log_det_fixed: f64,
    /// `yᵀWy − b_xᵀG_xx⁻¹b_x`.
    base_q: f64,
    eigen: Vec<f64>,
    proj_sq: Vec<f64>,
}

impl Spectral {
    fn new(design: &PenalizedDesign, cache: &GaussianCache) -> Result<Option<Self>> {
        if design.n_blocks() != 1 {
            return Ok(None);
        }
        let p = design.p;
        let k = design.ncoef();
        let r = k - p;
        let g = &cache.gram;
        let gzz = Mat::from_fn(r, r, |i, j| g[(p + i, p + j)]);
        let bz: Vec<f64> = cache.rhs[p..].to_vec();
        let (log_det_fixed, base_q, schur, cz) = if p == 0 {
            (0.0, cache.ywy, gzz, bz)
        } else {
            let gxx = Mat::from_fn(p, p, |i, j| g[(i, j)]);
            let gxz = Mat::from_fn(p, r, |i, j| g[(i, p + j)]);
            let ch = Cholesky::new(gxx.as_ref())?;
            if ch.repairs() > 0 {
                return Ok(None);
            }
            let bx = &cache.rhs[..p];
            let sol_b = ch.solve_vec(bx);
            let sol_z = ch.solve_mat(gxz.as_ref());
            let schur = Mat::from_fn(r, r, |i, j| {
                gzz[(i, j)] - (0..p).map(|l| gxz[(l, i)] * sol_z[(l, j)]).sum::<f64>()
            });
            let cz: Vec<f64> = (0..r)
                .map(|i| bz[i] - (0..p).map(|l| gxz[(l, i)] * sol_b[l]).sum::<f64>())
                .collect();
            (ch.log_det(), cache.ywy - dot(bx, &sol_b), schur, cz)
        };
        let mut schur = schur;
        crate::linalg::symmetrize(&mut schur);
        let e = sym_eigen(schur.as_ref())?;
        let proj_sq = (0..r)
            .map(|i| {
                let v: f64 = (0..r).map(|l| e.vectors[(l, i)] * cz[l]).sum();
                v * v
            })
            .collect();
        Ok(Some(Self {
            log_det_fixed,
            base_q,
            eigen: e.values.iter().map(|v| v.max(0.0)).collect(),
            proj_sq,
        }))
    }

    /// `(Q, log|H|, ‖γ‖²)` at `λ`.
    fn eval(&self, lambda: f64) -> (f64, f64, f64) {
        let mut q = self.base_q;
        let mut ld = self.log_det_fixed;
        let mut norm = 0.0;
        for (&e, &c) in self.eigen.iter().zip(&self.proj_sq) {
            let d = e + lambda;
            q -= c / d;
            ld += d.ln();
            norm += c / (d * d);
        }
        (q.max(0.0), ld, norm)
    }

    fn edf(&self, p: usize, lambda: f64) -> f64 {
        p as f64 + self.eigen.iter().map(|&e| e / (e + lambda)).sum::<f64>()
    }
}

/// A smoothing-parameter problem on a fixed reduced design.
pub struct RemlProblem<'a> {
    pub design: &'a PenalizedDesign,
    pub y: &'a [f64],
    pub weights: &'a [f64],
    pub family: Family,
    cache: Option<GaussianCache>,
    spectral: Option<Spectral>,
    pirls: PirlsOptions,
    warm: RefCell<Option<Vec<f64>>>,
}

impl<'a> RemlProblem<'a> {
    pub fn new(design: &'a PenalizedDesign, y: &'a [f64], weights: &'a [f64], family: Family) -> Result<Self> {
        if y.len() != design.n() || weights.len() != design.n() {
            return Err(GkrlsError::Dimension("outcome/weights length differs from design rows".into()));
        }
        family.validate(y)?;
        if design.n() <= design.p {
            return Err(GkrlsError::Data(format!(
                "{} rows for {} unpenalized coefficients",
                design.n(),
                design.p
            )));
        }
        let (cache, spectral) = if family.is_gaussian() {
            let c = GaussianCache::new(design, y, weights);
            let s = Spectral::new(design, &c)?;
            (Some(c), s)
        } else {
            (None, None)
        };
        Ok(Self {
            design,
            y,
            weights,
            family,
            cache,
            spectral,
            pirls: PirlsOptions {
                max_iter: 200,
                tol: 1e-12,
            },
            warm: RefCell::new(None),
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.design.n_blocks()
    }

    fn lambda(rho: &[f64]) -> Vec<f64> {
        rho.iter().map(|r| r.exp()).collect()
    }

    fn log_det_penalty(&self, rho: &[f64]) -> f64 {
        self.design.blocks.iter().zip(rho).map(|(b, r)| b.rank as f64 * r).sum()
    }

    /// Penalized fit at `ρ`.
    pub fn fit_at(&self, rho: &[f64]) -> Result<PenalizedFit> {
        let lambda = Self::lambda(rho);
        match &self.cache {
            Some(c) => gaussian_fit_from_cache(self.design, c, self.y, self.weights, &lambda),
            None => {
                let warm = self.warm.borrow().clone();
                let fit = pirls(self.design, self.y, self.weights, &lambda, self.family, &self.pirls, warm.as_deref())?;
                if fit.converged {
                    *self.warm.borrow_mut() = Some(fit.eta.clone());
                }
                Ok(fit)
            }
        }
    }

    /// Criterion at `ρ`; errors mean the inner problem failed.
    pub fn criterion(&self, rho: &[f64], scale: ScaleChoice) -> Result<CriterionValue> {
        if rho.len() != self.n_blocks() {
            return Err(GkrlsError::Dimension(format!(
                "{} log smoothing parameters for {} blocks",
                rho.len(),
                self.n_blocks()
            )));
        }
        let n = self.design.n() as f64;
        let p = self.design.p as f64;
        let k = self.design.ncoef() as f64;
        let r = k - p;
        let ldp = self.log_det_penalty(rho);
        if let Some(cache) = &self.cache {
            let (q, ldh) = match &self.spectral {
                Some(s) => {
                    let (q, ld, _) = s.eval(rho[0].exp());
                    (q, ld)
                }
                None => {
                    let (_, ch, q) = cache.solve(self.design, &Self::lambda(rho))?;
                    (q, ch.log_det())
                }
            };
            let sigma2 = match scale {
                ScaleChoice::Profile => q / (n - p),
                ScaleChoice::Fixed(s) => s,
            };
            if !(sigma2 > 0.0 && sigma2.is_finite()) {
                return Err(GkrlsError::Convergence("non-positive scale estimate".into()));
            }
            let ls = sigma2.ln();
            // ℓ − penalty/(2σ²) with ℓ the gaussian log-likelihood
            let fit_term = -0.5 * n * (LN_2PI + ls) + 0.5 * cache.sum_log_w - q / (2.0 * sigma2);
            let value = fit_term + 0.5 * (ldp - r * ls) - 0.5 * (ldh - k * ls) + 0.5 * p * LN_2PI;
            return Ok(CriterionValue {
                value,
                scale: sigma2,
                log_det_penalty: ldp,
                log_det_hessian: ldh,
            });
        }
        let fit = self.fit_at(rho)?;
        if !fit.converged {
            return Err(GkrlsError::Convergence("inner PIRLS did not converge".into()));
        }
        let ll = self.family.log_likelihood(self.y, &fit.eta, self.weights, 1.0);
        let ldh = fit.log_det_hessian();
        let value = ll - 0.5 * fit.penalty + 0.5 * ldp - 0.5 * ldh + 0.5 * p * LN_2PI;
        Ok(CriterionValue {
            value,
            scale: 1.0,
            log_det_penalty: ldp,
            log_det_hessian: ldh,
        })
    }

    /// `n·RSS/(n − edf)²` (gaussian only).
    pub fn gcv(&self, rho: &[f64]) -> Result<GcvValue> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| GkrlsError::InvalidArgument("GCV requires the gaussian family".into()))?;
        let n = self.design.n() as f64;
        let (rss, edf) = match &self.spectral {
            Some(s) => {
                let l = rho[0].exp();
                let (q, _, norm) = s.eval(l);
                ((q - l * norm).max(0.0), s.edf(self.design.p, l))
            }
            None => {
                let lambda = Self::lambda(rho);
                let (coef, ch, q) = cache.solve(self.design, &lambda)?;
                let pen: f64 = coef
                    .iter()
                    .zip(self.design.penalty_diag(&lambda))
                    .map(|(c, l)| l * c * c)
                    .sum();
                (q - pen, edf_from(&ch, &cache.gram))
            }
        };
        if edf >= n {
            return Err(GkrlsError::InvalidArgument(format!("effective degrees of freedom {edf} ≥ n")));
        }
        Ok(GcvValue {
            score: n * rss / (n - edf).powi(2),
            edf,
            rss,
        })
    }
}

fn edf_from(ch: &Cholesky, gram: &Mat<f64>) -> f64 {
    let s = ch.solve_mat(gram.as_ref());
    (0..s.nrows()).map(|i| s[(i, i)]).sum()
}

/// Effective degrees of freedom `tr(H⁻¹AᵀWA)` of a fit.
pub fn effective_df(fit: &PenalizedFit, design: &PenalizedDesign) -> f64 {
    let pen = design.penalty_diag(&fit.lambda);
    let hinv = fit.chol.inverse();
    pen.iter().enumerate().map(|(i, l)| 1.0 - l * hinv[(i, i)]).sum()
}

/// Convenience wrapper around [`RemlProblem::criterion`].
pub fn reml_criterion(
    design: &PenalizedDesign,
    y: &[f64],
    weights: &[f64],
    rho: &[f64],
    scale: ScaleChoice,
    family: Family,
) -> Result<f64> {
    RemlProblem::new(design, y, weights, family)?.criterion(rho, scale).map(|c| c.value)
}

/// Convenience wrapper around [`RemlProblem::gcv`].
pub fn gcv_criterion(design: &PenalizedDesign, y: &[f64], weights: &[f64], rho: &[f64]) -> Result<GcvValue> {
    RemlProblem::new(design, y, weights, Family::Gaussian)?.gcv(rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub rho_init: Option<Vec<f64>>,
    pub max_iter: usize,
    /// Also start from ρ = −3 and ρ = 3 when there are at most three blocks.
    pub multistart: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            rho_init: None,
            max_iter: 200,
            multistart: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub rho: Vec<f64>,
    pub criterion: f64,
}

/// Result of smoothing-parameter selection plus the fit at the optimum.
#[derive(Debug, Clone)]
pub struct RemlState {
    pub rule: Smoothing,
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub scale: f64,
    /// REML/Laplace criterion (or GCV score for the GCV rule).
    pub criterion: f64,
    pub fit: PenalizedFit,
    pub log_det_penalty: f64,
    pub log_det_hessian: f64,
    /// Unpenalized dimension in the reduced basis.
    pub null_space_dim: usize,
    pub edf: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TracePoint>,
}

fn starts(j: usize, opts: &OptimizeOptions) -> Vec<Vec<f64>> {
    match &opts.rho_init {
        Some(r) => vec![r.clone()],
        None if opts.multistart && j <= 3 => [-3.0, 0.0, 3.0].iter().map(|&v| vec![v; j]).collect(),
        None => vec![vec![0.0; j]],
    }
}

fn run_starts(
    j: usize,
    opts: &OptimizeOptions,
    mut objective: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64, usize, usize, bool, Vec<TracePoint>) {
    let mo = MinimizeOptions {
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let mut best: Option<(Vec<f64>, f64, usize, bool, Vec<TracePoint>)> = None;
    let mut evals = 0;
    for s in starts(j, opts) {
        let out = minimize(&mut objective, &s, &mo);
        evals += out.evaluations;
        let better = best.as_ref().map_or(true, |b| out.value < b.1);
        if better {
            let trace = out
                .path
                .iter()
                .map(|(x, f)| TracePoint {
                    rho: x.clone(),
                    criterion: -f,
                })
                .collect();
            best = Some((out.x, out.value, out.iterations, out.converged, trace));
        }
    }
    let (x, v, it, conv, trace) = best.expect("at least one start");
    (x, v, it, evals, conv, trace)
}

/// Maximize the restricted likelihood over `ρ` (σ² profiled for gaussian).
pub fn optimize_reml(problem: &RemlProblem<'_>, opts: &OptimizeOptions) -> Result<RemlState> {
    let j = problem.n_blocks();
    let (rho, neg, iterations, evaluations, converged, trace) = run_starts(j, opts, |r| {
        problem
            .criterion(r, ScaleChoice::Profile)
            .map_or(f64::INFINITY, |c| -c.value)
    });
    if !neg.is_finite() {
        return Err(GkrlsError::Convergence("criterion not finite at any start".into()));
    }
    if !converged {
        log::warn!("smoothing-parameter search hit its iteration budget");
    }
    finish(problem, Smoothing::Reml, rho, iterations, evaluations, converged, trace)
}

/// Minimize GCV over `ρ` (gaussian).
pub fn optimize_gcv(problem: &RemlProblem<'_>, opts: &OptimizeOptions) -> Result<RemlState> {
    let j = problem.n_blocks();
    let (rho, v, iterations, evaluations, converged, trace) =
        run_starts(j, opts, |r| problem.gcv(r).map_or(f64::INFINITY, |g| g.score.ln()));
    if !v.is_finite() {
        return Err(GkrlsError::Convergence("GCV not finite at any start".into()));
    }
    finish(problem, Smoothing::Gcv, rho, iterations, evaluations, converged, trace)
}

/// State at user-supplied smoothing parameters (λ = 0 allowed; the
/// criterion is then reported as NaN).
pub fn at_fixed_lambda(problem: &RemlProblem<'_>, lambda: &[f64]) -> Result<RemlState> {
    if lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(GkrlsError::InvalidArgument(format!("smoothing parameters {lambda:?}")));
    }
    if lambda.iter().all(|&l| l > 0.0) {
        let rho: Vec<f64> = lambda.iter().map(|l| l.ln()).collect();
        let mut st = finish(problem, Smoothing::Fixed(lambda.to_vec()), rho, 0, 0, true, vec![])?;
        st.lambda = lambda.to_vec();
        return Ok(st);
    }
    let fit = refit_exact(problem, lambda)?;
    let n = problem.design.n() as f64;
    let scale = if problem.family.is_gaussian() {
        (fit.deviance + fit.penalty) / (n - problem.design.p as f64)
    } else {
        1.0
    };
    Ok(RemlState {
        rule: Smoothing::Fixed(lambda.to_vec()),
        rho: lambda.iter().map(|l| l.ln()).collect(),
        lambda: lambda.to_vec(),
        scale,
        criterion: f64::NAN,
        log_det_penalty: f64::NEG_INFINITY,
        log_det_hessian: fit.log_det_hessian(),
        null_space_dim: problem.design.p,
        edf: effective_df(&fit, problem.design),
        converged: fit.converged,
        fit,
        iterations: 0,
        evaluations: 0,
        trace: vec![],
    })
}

fn refit_exact(problem: &RemlProblem<'_>, lambda: &[f64]) -> Result<PenalizedFit> {
    match &problem.cache {
        Some(c) => gaussian_fit_from_cache(problem.design, c, problem.y, problem.weights, lambda),
        None => pirls(
            problem.design,
            problem.y,
            problem.weights,
            lambda,
            problem.family,
            &PirlsOptions::default(),
            None,
        ),
    }
}

fn finish(
    problem: &RemlProblem<'_>,
    rule: Smoothing,
    rho: Vec<f64>,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    trace: Vec<TracePoint>,
) -> Result<RemlState> {
    let c = problem.criterion(&rho, ScaleChoice::Profile)?;
    let fit = problem.fit_at(&rho)?;
    let criterion = match rule {
        Smoothing::Gcv => problem.gcv(&rho)?.score,
        _ => c.value,
    };
    let edf = effective_df(&fit, problem.design);
    Ok(RemlState {
        rule,
        lambda: rho.iter().map(|r| r.exp()).collect(),
        rho,
        scale: c.scale,
        criterion,
        log_det_penalty: c.log_det_penalty,
        log_det_hessian: c.log_det_hessian,
        null_space_dim: problem.design.p,
        edf,
        converged: converged && fit.converged,
        fit,
        iterations,
        evaluations,
        trace,
    })
}

/// Select smoothing parameters by `rule` and return the fit at the choice.
pub fn select(problem: &RemlProblem<'_>, rule: &Smoothing, opts: &OptimizeOptions) -> Result<RemlState> {
    if problem.n_blocks() == 0 {
        return finish(problem, Smoothing::Fixed(vec![]), vec![], 0, 0, true, vec![]);
    }
    match rule {
        Smoothing::Reml => optimize_reml(problem, opts),
        Smoothing::Gcv => optimize_gcv(problem, opts),
        Smoothing::Fixed(l) => {
            if l.len() != problem.n_blocks() {
                return Err(GkrlsError::Dimension(format!(
                    "{} smoothing parameters for {} blocks",
                    l.len(),
                    problem.n_blocks()
                )));
            }
            at_fixed_lambda(problem, l)
        }
    }
}
