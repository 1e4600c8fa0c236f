//! End-to-end fitting: design assembly, smoothing selection, final fit and
//! the chosen covariance, bundled for prediction and effects.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{build_design, DesignRecipe, KernelDefaults, PenalizedDesign};
use crate::error::{GkrlsError, Result};
use crate::family::Family;
use crate::inference::{variance_bayes, variance_freq, variance_hh, Meat, SeKind, VarianceEstimate};
use crate::kernel::SketchPlanSummary;
use crate::linalg::mat_vec;
use crate::reml::{select, OptimizeOptions, RemlProblem, RemlState, Smoothing, TracePoint};
use crate::solver::{PenalizedFit, Scale};
use crate::spec::ModelSpec;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub family: Family,
    pub smoothing: Smoothing,
    pub kernel: KernelDefaults,
    pub seed: u64,
    pub se: SeKind,
    pub optimizer: OptimizeOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            smoothing: Smoothing::Reml,
            kernel: KernelDefaults::default(),
            seed: 0,
            se: SeKind::Bayes,
            optimizer: OptimizeOptions::default(),
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Convergence and bookkeeping exported with every fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n: usize,
    pub n_coef: usize,
    pub n_fixed: usize,
    pub smoothing: Smoothing,
    pub converged: bool,
    pub pirls_iterations: usize,
    pub deviance: f64,
    pub penalized_deviance_trace: Vec<f64>,
    pub rank_repairs: usize,
    pub eta_clamped: usize,
    pub optimizer_iterations: usize,
    pub optimizer_evaluations: usize,
    pub optimizer_trace: Vec<TracePoint>,
    pub criterion: Option<f64>,
    pub log_det_penalty: Option<f64>,
    pub log_det_hessian: Option<f64>,
    pub null_space_dim: usize,
    pub edf: f64,
    pub warnings: Vec<String>,
}

/// In-memory training state (not persisted).
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub design: PenalizedDesign,
    pub fit: PenalizedFit,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub family: Family,
    pub recipe: DesignRecipe,
    /// Reduced coefficients.
    pub coef: Vec<f64>,
    pub lambda: Vec<f64>,
    pub scale: f64,
    pub se_kind: SeKind,
    pub variance: VarianceEstimate,
    pub diagnostics: FitDiagnostics,
    pub training: Option<TrainingState>,
}

/// Fit `spec` on `data`.
///
/// When the spec names an outcome other than the data set's, that numeric
/// column is used as the outcome.
pub fn fit_model(data: &Dataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FittedModel> {
    let swapped;
    let data = if spec.outcome.is_empty() || spec.outcome == data.outcome_name() {
        data
    } else {
        let col = data
            .column(&spec.outcome)
            .ok_or_else(|| GkrlsError::Spec(format!("outcome column '{}' not found", spec.outcome)))?;
        swapped = data.with_outcome(&spec.outcome, col.to_vec())?;
        &swapped
    };
    let spec = spec.with_outcome(data.outcome_name());
    let y = data.outcome().to_vec();
    opts.family.validate(&y)?;
    let (design, recipe, mut warnings) = build_design(data, &spec, &opts.kernel, opts.seed)?;
    let weights = data.weights().to_vec();
    let problem = RemlProblem::new(&design, &y, &weights, opts.family)?;
    let state = select(&problem, &opts.smoothing, &opts.optimizer)?;
    drop(problem);
    if state.fit.rank_repairs > 0 {
        warnings.push(format!("{} numerically singular pivot(s) regularized", state.fit.rank_repairs));
    }
    if state.fit.eta_clamped > 0 {
        warnings.push("linear predictor clamped; possible separation".into());
    }
    let variance = compute_variance(&opts.se, &state.fit, &design, data, &y, &weights, state.scale)?;
    warnings.extend(variance.warnings.iter().cloned());
    let diagnostics = diagnostics_from(&state, &design, warnings);
    Ok(FittedModel {
        spec,
        family: opts.family,
        coef: state.fit.coef.clone(),
        lambda: state.lambda.clone(),
        scale: state.scale,
        se_kind: opts.se.clone(),
        variance,
        diagnostics,
        recipe,
        training: Some(TrainingState {
            design,
            fit: state.fit,
            y,
            weights,
        }),
    })
}

fn compute_variance(
    se: &SeKind,
    fit: &PenalizedFit,
    design: &PenalizedDesign,
    data: &Dataset,
    y: &[f64],
    weights: &[f64],
    scale: f64,
) -> Result<VarianceEstimate> {
    match se {
        SeKind::Bayes => variance_bayes(fit, scale),
        SeKind::Robust => variance_freq(fit, design, y, weights, Meat::Hc),
        SeKind::Cluster(col) => {
            let f = data
                .factor(col)
                .ok_or_else(|| GkrlsError::Data(format!("cluster column '{col}' not found or not categorical")))?;
            variance_freq(fit, design, y, weights, Meat::Cluster(&f.codes))
        }
    }
}

fn diagnostics_from(state: &RemlState, design: &PenalizedDesign, warnings: Vec<String>) -> FitDiagnostics {
    FitDiagnostics {
        n: design.n(),
        n_coef: design.ncoef(),
        n_fixed: design.p,
        smoothing: state.rule.clone(),
        converged: state.converged,
        pirls_iterations: state.fit.iterations,
        deviance: state.fit.deviance,
        penalized_deviance_trace: state.fit.deviance_trace.clone(),
        rank_repairs: state.fit.rank_repairs,
        eta_clamped: state.fit.eta_clamped,
        optimizer_iterations: state.iterations,
        optimizer_evaluations: state.evaluations,
        optimizer_trace: state.trace.clone(),
        criterion: finite(state.criterion),
        log_det_penalty: finite(state.log_det_penalty),
        log_det_hessian: finite(state.log_det_hessian),
        null_space_dim: state.null_space_dim,
        edf: state.edf,
        warnings,
    }
}

impl FittedModel {
    pub fn outcome_name(&self) -> &str {
        &self.spec.outcome
    }

    /// Reduced design rows for a data set, built with the stored transforms.
    pub fn design_rows(&self, data: &Dataset) -> Result<Mat<f64>> {
        self.recipe.design_for(data)
    }

    pub fn predict_rows(&self, rows: MatRef<'_, f64>, scale: Scale) -> Result<Vec<f64>> {
        crate::solver::predict(&self.coef, rows, self.family, scale)
    }

    pub fn predict(&self, data: &Dataset, scale: Scale) -> Result<Vec<f64>> {
        let rows = self.design_rows(data)?;
        self.predict_rows(rows.as_ref(), scale)
    }

    pub fn linear_predictor(&self, rows: MatRef<'_, f64>) -> Vec<f64> {
        mat_vec(rows, &self.coef)
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.recipe.fixed.names()
    }

    /// `(β, [α_j])` on the original blocks.
    pub fn coefficients(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p = self.recipe.fixed.p();
        let beta = self.coef[..p].to_vec();
        let alphas = self
            .recipe
            .blocks
            .iter()
            .map(|b| {
                let g = &self.coef[b.offset..b.offset + b.rank];
                match &b.basis {
                    Some(u) => mat_vec(u.as_ref(), g),
                    None => g.to_vec(),
                }
            })
            .collect();
        (beta, alphas)
    }

    /// Standard errors of the fixed effects under the chosen covariance.
    pub fn fixed_se(&self) -> Vec<f64> {
        (0..self.recipe.fixed.p())
            .map(|i| self.variance.reduced[(i, i)].max(0.0).sqrt())
            .collect()
    }

    pub fn sketch_plans(&self) -> Vec<(String, SketchPlanSummary)> {
        self.recipe
            .terms
            .iter()
            .filter_map(|t| match t {
                crate::design::TermRecipe::Kernel { label, plan, .. } => Some((label.clone(), plan.clone())),
                _ => None,
            })
            .collect()
    }

    fn training(&self) -> Result<&TrainingState> {
        self.training
            .as_ref()
            .ok_or_else(|| GkrlsError::InvalidArgument("training state is not available for a loaded model".into()))
    }

    /// Bayesian covariance `σ²H⁻¹`.
    pub fn variance_bayes(&self) -> Result<VarianceEstimate> {
        variance_bayes(&self.training()?.fit, self.scale)
    }

    pub fn variance_freq(&self, meat: Meat<'_>) -> Result<VarianceEstimate> {
        let t = self.training()?;
        variance_freq(&t.fit, &t.design, &t.y, &t.weights, meat)
    }

    pub fn variance_hh(&self) -> Result<VarianceEstimate> {
        let t = self.training()?;
        variance_hh(&t.fit, &t.design, &self.recipe, &t.y, &t.weights, self.scale)
    }

    /// Fitted values on the response scale (training only).
    pub fn fitted(&self) -> Result<Vec<f64>> {
        Ok(self.training()?.fit.mu.clone())
    }

    /// Drop the in-memory training state.
    pub fn without_training(mut self) -> Self {
        self.training = None;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::parse_spec;

    fn linear_data(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.913).sin() * 3.0).collect();
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * x[i] - z[i] + 0.1 * ((i * 13) % 7) as f64).collect();
        Dataset::builder("y", y).numeric("x", x).numeric("z", z).build().unwrap()
    }

    #[test]
    fn unpenalized_fit_is_least_squares() {
        let d = linear_data(40);
        let m = fit_model(&d, &parse_spec("y ~ fixed(x, z)").unwrap(), &FitOptions::default()).unwrap();
        let pred = m.predict(&d, Scale::Response).unwrap();
        let fitted = m.fitted().unwrap();
        for (a, b) in pred.iter().zip(&fitted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.fixed_names(), vec!["(Intercept)", "x", "z"]);
        let x = m.design_rows(&d).unwrap();
        let xtx = x.transpose() * &x;
        let ols = crate::linalg::Cholesky::new(xtx.as_ref())
            .unwrap()
            .solve_vec(&crate::linalg::mat_t_vec(x.as_ref(), d.outcome()));
        for (a, b) in m.coef.iter().zip(&ols) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(m.fixed_se().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn kernel_fit_predicts_training_rows() {
        let d = linear_data(60);
        let m = fit_model(&d, &parse_spec("y ~ kernel(x, z; size=12)").unwrap(), &FitOptions::default()).unwrap();
        let pred = m.predict(&d, Scale::Response).unwrap();
        let fitted = m.fitted().unwrap();
        let diff = pred.iter().zip(&fitted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
        assert_eq!(m.lambda.len(), 1);
        assert!(m.diagnostics.criterion.is_some());
    }
}
