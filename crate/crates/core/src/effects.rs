//! Average marginal effects, prediction grids and contrasts on the response
//! scale, with delta-method standard errors over the reduced coefficients.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GkrlsError, Result};
use crate::model::FittedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Derivative,
    FirstDifference,
    PredictedGrid,
    SecondDerivative,
    EndpointContrast,
}

#[derive(Debug, Clone, Default)]
pub struct EffectOptions {
    pub step: Option<f64>,
    pub individual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub variable: String,
    pub kind: EffectKind,
    /// Grid values (or labels' positions) the estimates refer to.
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Per-row values for each estimate when requested.
    pub individual: Option<Vec<Vec<f64>>>,
    pub step: Option<f64>,
    pub outside_range: Vec<bool>,
}

impl EffectEstimate {
    /// Normal-approximation interval.
    pub fn interval(&self, i: usize, level: f64) -> (f64, f64) {
        let z = normal_quantile(0.5 + level / 2.0);
        (self.estimate[i] - z * self.se[i], self.estimate[i] + z * self.se[i])
    }

    /// CSV rows `variable,kind,label,grid,estimate,se,ci_lo,ci_hi`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for i in 0..self.estimate.len() {
            let (lo, hi) = self.interval(i, 0.95);
            w.serialize((
                &self.variable,
                serde_json::to_value(self.kind)?.as_str().unwrap_or(""),
                &self.labels[i],
                self.grid.get(i).copied(),
                self.estimate[i],
                self.se[i],
                lo,
                hi,
            ))?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 8] = ["variable", "kind", "label", "grid", "estimate", "se", "ci_lo", "ci_hi"];

/// Acklam's rational approximation refined by one Newton step.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let pl = 0.02425;
    let x = if p < pl {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - pl {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `lo:hi:n` → `n` evenly spaced values.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || GkrlsError::InvalidArgument(format!("grid '{text}' is not lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

/// Response-scale predictions and their mean-gradient at one counterfactual setting.
struct Setting {
    mu: Vec<f64>,
    rows: Mat<f64>,
    mu_eta: Vec<f64>,
}

fn evaluate(model: &FittedModel, data: &Dataset, variable: &str, values: &[f64]) -> Result<Setting> {
    let d = data.with_column(variable, values)?;
    let rows = model.design_rows(&d)?;
    let eta = model.linear_predictor(rows.as_ref());
    Ok(Setting {
        mu: eta.iter().map(|&e| model.family.linkinv(e)).collect(),
        mu_eta: eta.iter().map(|&e| model.family.mu_eta(e)).collect(),
        rows,
    })
}

/// Add `Σ_i c_i μ'_i a_i / N` to `g`.
fn accumulate(g: &mut [f64], s: &Setting, c: &[f64]) {
    let n = s.rows.nrows() as f64;
    for j in 0..s.rows.ncols() {
        let col = s.rows.col(j);
        let mut acc = 0.0;
        for i in 0..col.nrows() {
            acc += c[i] * s.mu_eta[i] * col[i];
        }
        g[j] += acc / n;
    }
}

/// One combined quantity per estimate: per-row values and the gradient of the average.
struct Pieces {
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

fn finish(
    model: &FittedModel,
    variable: &str,
    kind: EffectKind,
    grid: Vec<f64>,
    labels: Vec<String>,
    pieces: Pieces,
    step: Option<f64>,
    outside_range: Vec<bool>,
    opts: &EffectOptions,
) -> EffectEstimate {
    let estimate: Vec<f64> = pieces
        .values
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let m = pieces.grads.len();
    let mut cov = vec![vec![0.0; m]; m];
    let k = model.coef.len();
    let vg: Vec<Vec<f64>> = pieces
        .grads
        .iter()
        .map(|g| (0..k).map(|i| (0..k).map(|j| model.variance.reduced[(i, j)] * g[j]).sum()).collect())
        .collect();
    for a in 0..m {
        for b in 0..m {
            cov[a][b] = pieces.grads[a].iter().zip(&vg[b]).map(|(x, y)| x * y).sum();
        }
    }
    let se = (0..m).map(|a| cov[a][a].max(0.0).sqrt()).collect();
    EffectEstimate {
        variable: variable.to_string(),
        kind,
        grid,
        labels,
        estimate,
        se,
        covariance: cov,
        individual: opts.individual.then_some(pieces.values),
        step,
        outside_range,
    }
}

fn variable_values<'a>(data: &'a Dataset, variable: &str) -> Result<&'a [f64]> {
    if data.factor(variable).is_some() && data.column(variable).is_none() {
        return Err(GkrlsError::InvalidArgument(format!(
            "'{variable}' is categorical; request contrasts between its indicator columns"
        )));
    }
    data.column(variable)
        .ok_or_else(|| GkrlsError::InvalidArgument(format!("unknown variable '{variable}'")))
}

pub fn is_binary(x: &[f64]) -> bool {
    x.iter().all(|&v| v == 0.0 || v == 1.0) && x.contains(&0.0) && x.contains(&1.0)
}

fn scale_of(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0)
}

fn first_step(x: &[f64], step: Option<f64>) -> Result<f64> {
    match step {
        Some(h) if h > 0.0 && h.is_finite() => Ok(h),
        Some(h) => Err(GkrlsError::InvalidArgument(format!("step {h} must be positive"))),
        None => Ok(scale_of(x) * f64::EPSILON.sqrt()),
    }
}

/// Central differences at `base` with representable steps; returns per-row
/// derivatives and the gradient of their mean.
fn central_derivative(
    model: &FittedModel,
    data: &Dataset,
    variable: &str,
    base: &[f64],
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let up: Vec<f64> = base.iter().map(|&v| v + h).collect();
    let dn: Vec<f64> = base.iter().map(|&v| v - h).collect();
    let span: Vec<f64> = (0..base.len()).map(|i| (up[i] - base[i]) + (base[i] - dn[i])).collect();
    let sp = evaluate(model, data, variable, &up)?;
    let sm = evaluate(model, data, variable, &dn)?;
    let vals: Vec<f64> = (0..base.len()).map(|i| (sp.mu[i] - sm.mu[i]) / span[i]).collect();
    let mut g = vec![0.0; model.coef.len()];
    let cp: Vec<f64> = span.iter().map(|s| 1.0 / s).collect();
    let cm: Vec<f64> = span.iter().map(|s| -1.0 / s).collect();
    accumulate(&mut g, &sp, &cp);
    accumulate(&mut g, &sm, &cm);
    Ok((vals, g))
}

/// Average marginal effect at observed covariates. Binary 0/1 variables
/// are handled by the first difference 0 → 1.
pub fn ame(model: &FittedModel, data: &Dataset, variable: &str, opts: &EffectOptions) -> Result<EffectEstimate> {
    let x = variable_values(data, variable)?.to_vec();
    if is_binary(&x) {
        return first_difference(model, data, variable, 0.0, 1.0, opts);
    }
    let h = first_step(&x, opts.step)?;
    let (vals, g) = central_derivative(model, data, variable, &x, h)?;
    Ok(finish(
        model,
        variable,
        EffectKind::Derivative,
        vec![],
        vec!["ame".into()],
        Pieces {
            values: vec![vals],
            grads: vec![g],
        },
        Some(h),
        vec![false],
        opts,
    ))
}

/// Average change in the prediction when the variable moves from `from` to `to` for every row.
pub fn first_difference(
    model: &FittedModel,
    data: &Dataset,
    variable: &str,
    from: f64,
    to: f64,
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    let x = variable_values(data, variable)?;
    let n = x.len();
    let s1 = evaluate(model, data, variable, &vec![to; n])?;
    let s0 = evaluate(model, data, variable, &vec![from; n])?;
    let vals: Vec<f64> = (0..n).map(|i| s1.mu[i] - s0.mu[i]).collect();
    let mut g = vec![0.0; model.coef.len()];
    accumulate(&mut g, &s1, &vec![1.0; n]);
    accumulate(&mut g, &s0, &vec![-1.0; n]);
    let outside = range_flags(x, &[from, to]);
    Ok(finish(
        model,
        variable,
        EffectKind::FirstDifference,
        vec![to],
        vec![format!("{from}->{to}")],
        Pieces {
            values: vec![vals],
            grads: vec![g],
        },
        None,
        vec![outside.iter().any(|&b| b)],
        opts,
    ))
}

fn range_flags(x: &[f64], grid: &[f64]) -> Vec<bool> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid.iter().map(|&e| e < lo || e > hi).collect()
}

/// Average predicted outcome with the variable set to each grid value.
pub fn predicted_grid(
    model: &FittedModel,
    data: &Dataset,
    variable: &str,
    grid: &[f64],
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    if grid.is_empty() {
        return Err(GkrlsError::InvalidArgument("empty grid".into()));
    }
    let x = variable_values(data, variable)?;
    let n = x.len();
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for &e in grid {
        let s = evaluate(model, data, variable, &vec![e; n])?;
        let mut g = vec![0.0; model.coef.len()];
        accumulate(&mut g, &s, &vec![1.0; n]);
        values.push(s.mu);
        grads.push(g);
    }
    Ok(finish(
        model,
        variable,
        EffectKind::PredictedGrid,
        grid.to_vec(),
        grid.iter().map(|e| format!("{e}")).collect(),
        Pieces { values, grads },
        None,
        range_flags(x, grid),
        opts,
    ))
}

/// Average derivative with the variable set to each grid value.
pub fn derivative_grid(
    model: &FittedModel,
    data: &Dataset,
    variable: &str,
    grid: &[f64],
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    let x = variable_values(data, variable)?;
    let n = x.len();
    let h = first_step(x, opts.step)?;
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for &e in grid {
        let (v, g) = central_derivative(model, data, variable, &vec![e; n], h)?;
        values.push(v);
        grads.push(g);
    }
    Ok(finish(
        model,
        variable,
        EffectKind::Derivative,
        grid.to_vec(),
        grid.iter().map(|e| format!("{e}")).collect(),
        Pieces { values, grads },
        Some(h),
        range_flags(x, grid),
        opts,
    ))
}

/// Average second derivative, at observed values (`grid = None`) or with the
/// variable set to each grid value.
pub fn second_derivative_avg(
    model: &FittedModel,
    data: &Dataset,
    variable: &str,
    grid: Option<&[f64]>,
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    let x = variable_values(data, variable)?.to_vec();
    let n = x.len();
    let scale = scale_of(&x);
    let h = match opts.step {
        Some(h) => h,
        None => scale * f64::EPSILON.cbrt(),
    };
    if !(h >= 1e-6 * scale) {
        return Err(GkrlsError::InvalidArgument(format!(
            "second-difference step {h} is below 1e-6 × {scale}"
        )));
    }
    let bases: Vec<Vec<f64>> = match grid {
        Some(g) => g.iter().map(|&e| vec![e; n]).collect(),
        None => vec![x.clone()],
    };
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for base in &bases {
        let up: Vec<f64> = base.iter().map(|&v| v + h).collect();
        let dn: Vec<f64> = base.iter().map(|&v| v - h).collect();
        let s0 = evaluate(model, data, variable, base)?;
        let sp = evaluate(model, data, variable, &up)?;
        let sm = evaluate(model, data, variable, &dn)?;
        let mut cp = vec![0.0; n];
        let mut c0 = vec![0.0; n];
        let mut cm = vec![0.0; n];
        let mut v = vec![0.0; n];
        for i in 0..n {
            let hp = up[i] - base[i];
            let hm = base[i] - dn[i];
            cp[i] = 2.0 / (hp * (hp + hm));
            c0[i] = -2.0 / (hp * hm);
            cm[i] = 2.0 / (hm * (hp + hm));
            v[i] = cp[i] * sp.mu[i] + c0[i] * s0.mu[i] + cm[i] * sm.mu[i];
        }
        let mut g = vec![0.0; model.coef.len()];
        accumulate(&mut g, &sp, &cp);
        accumulate(&mut g, &s0, &c0);
        accumulate(&mut g, &sm, &cm);
        values.push(v);
        grads.push(g);
    }
    let (gridv, labels, flags) = match grid {
        Some(g) => (g.to_vec(), g.iter().map(|e| format!("{e}")).collect(), range_flags(&x, g)),
        None => (vec![], vec!["observed".into()], vec![false]),
    };
    Ok(finish(
        model,
        variable,
        EffectKind::SecondDerivative,
        gridv,
        labels,
        Pieces { values, grads },
        Some(h),
        flags,
        opts,
    ))
}

/// `AME(e_max) − AME(e_min)` and `[p̄(e_max) − p̄(e_inf)] − [p̄(e_inf) − p̄(e_min)]`.
pub fn endpoint_contrast(
    model: &FittedModel,
    data: &Dataset,
    variable: &str,
    e_min: f64,
    e_max: f64,
    e_inf: f64,
    opts: &EffectOptions,
) -> Result<EffectEstimate> {
    let x = variable_values(data, variable)?.to_vec();
    let n = x.len();
    let h = first_step(&x, opts.step)?;
    let (d_hi, g_hi) = central_derivative(model, data, variable, &vec![e_max; n], h)?;
    let (d_lo, g_lo) = central_derivative(model, data, variable, &vec![e_min; n], h)?;
    let s_max = evaluate(model, data, variable, &vec![e_max; n])?;
    let s_inf = evaluate(model, data, variable, &vec![e_inf; n])?;
    let s_min = evaluate(model, data, variable, &vec![e_min; n])?;
    let ame_diff: Vec<f64> = (0..n).map(|i| d_hi[i] - d_lo[i]).collect();
    let g_ame: Vec<f64> = g_hi.iter().zip(&g_lo).map(|(a, b)| a - b).collect();
    let did: Vec<f64> = (0..n)
        .map(|i| (s_max.mu[i] - s_inf.mu[i]) - (s_inf.mu[i] - s_min.mu[i]))
        .collect();
    let mut g_did = vec![0.0; model.coef.len()];
    accumulate(&mut g_did, &s_max, &vec![1.0; n]);
    accumulate(&mut g_did, &s_inf, &vec![-2.0; n]);
    accumulate(&mut g_did, &s_min, &vec![1.0; n]);
    let flags = range_flags(&x, &[e_min, e_max, e_inf]);
    let any = flags.iter().any(|&b| b);
    Ok(finish(
        model,
        variable,
        EffectKind::EndpointContrast,
        vec![e_min, e_max, e_inf],
        vec!["ame_max_minus_min".into(), "prediction_diff_in_diff".into()],
        Pieces {
            values: vec![ame_diff, did],
            grads: vec![g_ame, g_did],
        },
        Some(h),
        vec![any, any],
        opts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use crate::model::{fit_model, FitOptions};
    use crate::spec::parse_spec;

    fn linear() -> (Dataset, FittedModel) {
        let n = 50;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).sin() * 2.0).collect();
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.23).cos()).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.5 * x[i] + z[i] + 0.3 * ((i * 7) % 5) as f64).collect();
        let d = Dataset::builder("y", y).numeric("x", x).numeric("z", z).build().unwrap();
        let m = fit_model(&d, &parse_spec("y ~ fixed(x, z)").unwrap(), &FitOptions::default()).unwrap();
        (d, m)
    }

    #[test]
    fn linear_ame_is_coefficient() {
        let (d, m) = linear();
        let e = ame(&m, &d, "x", &EffectOptions { individual: true, ..Default::default() }).unwrap();
        assert!((e.estimate[0] - m.coef[1]).abs() < 1e-6);
        assert!((e.se[0] - m.fixed_se()[1]).abs() < 1e-6 * (1.0 + e.se[0]));
        let ind = &e.individual.as_ref().unwrap()[0];
        assert_eq!(e.estimate[0], ind.iter().sum::<f64>() / ind.len() as f64);
        let s = second_derivative_avg(&m, &d, "x", None, &EffectOptions::default()).unwrap();
        assert!(s.estimate[0].abs() < 1e-4);
        let c = endpoint_contrast(&m, &d, "x", -1.0, 1.0, 0.0, &EffectOptions::default()).unwrap();
        assert!(c.estimate[0].abs() < 1e-6);
        assert!(c.estimate[1].abs() < 1e-10);
    }

    #[test]
    fn grid_difference_is_coefficient() {
        let (d, m) = linear();
        let g = predicted_grid(&m, &d, "x", &[0.0, 1.0], &EffectOptions::default()).unwrap();
        assert!((g.estimate[1] - g.estimate[0] - m.coef[1]).abs() < 1e-10);
        assert_eq!(g.outside_range, vec![false, false]);
        let far = predicted_grid(&m, &d, "x", &[10.0], &EffectOptions::default()).unwrap();
        assert_eq!(far.outside_range, vec![true]);
    }

    #[test]
    fn logistic_derivative_formula() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.41).sin() * 2.0).collect();
        let y: Vec<f64> = (0..n).map(|i| ((x[i] + 0.8 * ((i * 5) % 3) as f64 - 0.8) > 0.0) as u8 as f64).collect();
        let d = Dataset::builder("y", y).numeric("x", x.clone()).build().unwrap();
        let opts = FitOptions {
            family: Family::BinomialLogit,
            ..Default::default()
        };
        let m = fit_model(&d, &parse_spec("y ~ fixed(x)").unwrap(), &opts).unwrap();
        let e = ame(&m, &d, "x", &EffectOptions { individual: true, ..Default::default() }).unwrap();
        let ind = &e.individual.as_ref().unwrap()[0];
        for i in 0..n {
            let p = 1.0 / (1.0 + (-(m.coef[0] + m.coef[1] * x[i])).exp());
            assert!((ind[i] - p * (1.0 - p) * m.coef[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_variable_uses_first_difference() {
        let n = 40;
        let w: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 2.0 * w[i] + (i as f64 * 0.3).sin()).collect();
        let d = Dataset::builder("y", y).numeric("w", w).build().unwrap();
        let m = fit_model(&d, &parse_spec("y ~ fixed(w)").unwrap(), &FitOptions::default()).unwrap();
        let e = ame(&m, &d, "w", &EffectOptions::default()).unwrap();
        assert_eq!(e.kind, EffectKind::FirstDifference);
        assert!((e.estimate[0] - m.coef[1]).abs() < 1e-12);
    }

    #[test]
    fn grid_parsing_and_quantiles() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0:1").is_err());
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!(ame(&linear().1, &linear().0, "nope", &EffectOptions::default()).is_err());
    }
}
