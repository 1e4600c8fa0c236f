//! Data-generating processes with analytic truths.

use std::f64::consts::PI;

use gkrls_core::data::Dataset;
use gkrls_core::rng::{seeded, Rng};
use gkrls_core::{GkrlsError, Result};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    ThreeHills,
    FeLinear,
    FeNonlinear,
    BivariateCoverage,
    PlrSynthetic,
}

impl std::str::FromStr for DgpKind {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three_hills" => Ok(Self::ThreeHills),
            "fe_linear" => Ok(Self::FeLinear),
            "fe_nonlinear" => Ok(Self::FeNonlinear),
            "bivariate_coverage" => Ok(Self::BivariateCoverage),
            "plr_synthetic" => Ok(Self::PlrSynthetic),
            _ => Err(GkrlsError::InvalidArgument(format!(
                "unknown dgp '{s}' (three_hills, fe_linear, fe_nonlinear, bivariate_coverage, plr_synthetic)"
            ))),
        }
    }
}

impl std::fmt::Display for DgpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ThreeHills => "three_hills",
            Self::FeLinear => "fe_linear",
            Self::FeNonlinear => "fe_nonlinear",
            Self::BivariateCoverage => "bivariate_coverage",
            Self::PlrSynthetic => "plr_synthetic",
        })
    }
}

/// A simulated data set with the noiseless mean and per-row partial
/// derivatives of the mean with respect to `x1` and `x2`.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub mean: Vec<f64>,
    pub d_x1: Vec<f64>,
    pub d_x2: Vec<f64>,
}

impl Simulated {
    /// Sample-average derivatives `(AME_x1, AME_x2)`.
    pub fn true_ame(&self) -> (f64, f64) {
        (mean(&self.d_x1), mean(&self.d_x2))
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub const THREE_HILLS_NOISE_SD: f64 = 0.5;

pub fn three_hills_mean(x1: f64, x2: f64) -> f64 {
    x1.sin() * x2.cos()
}

/// `y ~ N(sin(x1)·cos(x2), 0.25)` with `x1, x2 ~ Uniform(−π, π)`.
pub fn three_hills(n: usize, seed: u64) -> Result<Simulated> {
    if n < 10 {
        return Err(GkrlsError::InvalidArgument("three hills needs N ≥ 10".into()));
    }
    let mut rng = seeded(seed);
    let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
    let mu: Vec<f64> = (0..n).map(|i| three_hills_mean(x1[i], x2[i])).collect();
    let y: Vec<f64> = mu.iter().map(|m| m + THREE_HILLS_NOISE_SD * normal(&mut rng)).collect();
    let d_x1 = (0..n).map(|i| x1[i].cos() * x2[i].cos()).collect();
    let d_x2 = (0..n).map(|i| -x1[i].sin() * x2[i].sin()).collect();
    Ok(Simulated {
        data: Dataset::builder("y", y).numeric("x1", x1).numeric("x2", x2).build()?,
        mean: mu,
        d_x1,
        d_x2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeForm {
    Linear,
    Nonlinear,
}

impl std::fmt::Display for FeForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeForm::Linear => "linear",
            FeForm::Nonlinear => "nonlinear",
        })
    }
}

impl std::str::FromStr for FeForm {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FeForm::Linear),
            "nonlinear" => Ok(FeForm::Nonlinear),
            _ => Err(GkrlsError::InvalidArgument(format!("unknown functional form '{s}'"))),
        }
    }
}

/// Covariate part of the fixed-effects outcome: `(f, ∂f/∂x1, ∂f/∂x2)`.
pub fn fe_surface(form: FeForm, x1: f64, x2: f64) -> (f64, f64, f64) {
    match form {
        FeForm::Linear => (0.5 * x1 + 0.2 * x2, 0.5, 0.2),
        FeForm::Nonlinear => {
            let a1 = x1 - 0.15;
            let a2 = x2 - 0.15;
            let b1 = x1 - 0.5;
            let b2 = x2 - 0.5;
            let e1 = ((-(a1 * a1) - a2 * a2) / 4.0).exp();
            let e2 = 2.5 * ((-(b1 * b1) - b2 * b2) / 2.5).exp();
            (e1 + e2, -0.5 * a1 * e1 - 0.8 * b1 * e2, -0.5 * a2 * e1 - 0.8 * b2 * e2)
        }
    }
}

pub const FE_NOISE_VAR: f64 = 1.25;
pub const FE_EFFECT_VAR: f64 = 3.0;
pub const FE_MEAN_VAR: f64 = 0.3;
pub const GROUP_COLUMN: &str = "group";

/// Group-level draws shared by a training set and its test set.
#[derive(Debug, Clone)]
pub struct FeWorld {
    pub form: FeForm,
    pub effects: Vec<f64>,
    pub means: Vec<f64>,
    pub per_group: usize,
}

impl FeWorld {
    /// Draw `(μ_j, x̄_j)` from the bivariate normal with covariance
    /// `[[3, ρ], [ρ, 0.3]]`.
    pub fn new(groups: usize, per_group: usize, rho: f64, form: FeForm, rng: &mut Rng) -> Result<Self> {
        if groups < 2 || per_group < 2 {
            return Err(GkrlsError::InvalidArgument("need at least 2 groups of at least 2 rows".into()));
        }
        if !(0.0..=0.95).contains(&rho) {
            return Err(GkrlsError::InvalidArgument(format!("correlation {rho} outside [0, 0.95]")));
        }
        let a = FE_EFFECT_VAR.sqrt();
        let c = rho / a;
        let rest = FE_MEAN_VAR - c * c;
        if rest < 0.0 {
            return Err(GkrlsError::InvalidArgument(format!(
                "correlation {rho} makes the group covariance indefinite (limit {:.4})",
                (FE_EFFECT_VAR * FE_MEAN_VAR).sqrt()
            )));
        }
        let d = rest.sqrt();
        let mut effects = Vec::with_capacity(groups);
        let mut means = Vec::with_capacity(groups);
        for _ in 0..groups {
            let z1 = normal(rng);
            let z2 = normal(rng);
            effects.push(a * z1);
            means.push(c * z1 + d * z2);
        }
        Ok(Self {
            form,
            effects,
            means,
            per_group,
        })
    }

    /// `per_group` rows per group: `x1 ~ N(x̄_j, 1)`, `x2 ~ N(0, 1)`,
    /// `y = f(x1, x2) + μ_j + ε`, `ε ~ N(0, 1.25)`.
    pub fn sample(&self, rng: &mut Rng) -> Result<Simulated> {
        let n = self.effects.len() * self.per_group;
        let noise = Normal::new(0.0, FE_NOISE_VAR.sqrt()).expect("positive sd");
        let mut x1 = Vec::with_capacity(n);
        let mut x2 = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut mu = Vec::with_capacity(n);
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        for (j, (&eff, &xbar)) in self.effects.iter().zip(&self.means).enumerate() {
            for _ in 0..self.per_group {
                let a = xbar + normal(rng);
                let b = normal(rng);
                let (f, fa, fb) = fe_surface(self.form, a, b);
                let m = f + eff;
                x1.push(a);
                x2.push(b);
                g.push(format!("g{j:03}"));
                mu.push(m);
                y.push(m + noise.sample(rng));
                d1.push(fa);
                d2.push(fb);
            }
        }
        Ok(Simulated {
            data: Dataset::builder("y", y)
                .numeric("x1", x1)
                .numeric("x2", x2)
                .categorical(GROUP_COLUMN, &g)
                .build()?,
            mean: mu,
            d_x1: d1,
            d_x2: d2,
        })
    }
}

/// One training set and an independent test set from the same groups.
pub fn fe_dgp(groups: usize, per_group: usize, rho: f64, form: FeForm, seed: u64) -> Result<(Simulated, Simulated)> {
    let mut rng = seeded(seed);
    let world = FeWorld::new(groups, per_group, rho, form, &mut rng)?;
    let train = world.sample(&mut rng)?;
    let test = world.sample(&mut rng)?;
    Ok((train, test))
}

pub const COVERAGE_SX: f64 = 0.3;
pub const COVERAGE_SZ: f64 = 0.4;

/// Two-bump surface on the unit square (`sx = 0.3`, `sz = 0.4`).
pub fn bivariate_surface(x: f64, z: f64) -> f64 {
    let sx2 = COVERAGE_SX * COVERAGE_SX;
    let sz2 = COVERAGE_SZ * COVERAGE_SZ;
    PI.powf(COVERAGE_SX)
        * COVERAGE_SZ
        * (1.2 * (-(x - 0.2).powi(2) / sx2 - (z - 0.3).powi(2) / sz2).exp()
            + 0.8 * (-(x - 0.7).powi(2) / sx2 - (z - 0.8).powi(2) / sz2).exp())
}

/// `y ~ N(f(x, z), 1)`, `x, z ~ Uniform(0, 1)`; columns `x`, `z`.
pub fn bivariate_coverage(n: usize, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    let mut rng = seeded(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let f: Vec<f64> = (0..n).map(|i| bivariate_surface(x[i], z[i])).collect();
    let y = f.iter().map(|v| v + normal(&mut rng)).collect();
    Ok((Dataset::builder("y", y).numeric("x", x).numeric("z", z).build()?, f))
}

/// Evenly spaced `k × k` grid on the unit square with true surface values.
pub fn coverage_grid(k: usize) -> Result<(Dataset, Vec<f64>)> {
    let step = 1.0 / (k as f64 - 1.0);
    let mut x = Vec::with_capacity(k * k);
    let mut z = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            x.push(i as f64 * step);
            z.push(j as f64 * step);
        }
    }
    let f: Vec<f64> = x.iter().zip(&z).map(|(&a, &b)| bivariate_surface(a, b)).collect();
    Ok((
        Dataset::builder("y", vec![0.0; k * k]).numeric("x", x).numeric("z", z).build()?,
        f,
    ))
}

pub const TREATMENT_COLUMN: &str = "w";

/// Randomized binary treatment with a constant effect:
/// `y = θ·w + g(x) + ε`, `w ~ Bernoulli(1/2)` independent of `x ~ N(0, I₃)`,
/// `g(x) = sin(x1) + 0.5·x2² + 0.5·x3`, `ε ~ N(0, 1)`.
pub fn plr_synthetic(n: usize, theta: f64, seed: u64) -> Result<Dataset> {
    let mut rng = seeded(seed);
    let mut cols = vec![Vec::with_capacity(n); 3];
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
        let t = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let g = x[0].sin() + 0.5 * x[1] * x[1] + 0.5 * x[2];
        y.push(theta * t + g + normal(&mut rng));
        w.push(t);
        for (c, v) in cols.iter_mut().zip(&x) {
            c.push(*v);
        }
    }
    let mut it = cols.into_iter();
    Dataset::builder("y", y)
        .numeric("x1", it.next().unwrap())
        .numeric("x2", it.next().unwrap())
        .numeric("x3", it.next().unwrap())
        .numeric(TREATMENT_COLUMN, w)
        .build()
}

/// Conditional means `(m0, m1, e)` of [`plr_synthetic`] for injection tests.
pub fn plr_truth(data: &Dataset, theta: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let x1 = data.column("x1").expect("x1");
    let x2 = data.column("x2").expect("x2");
    let x3 = data.column("x3").expect("x3");
    let g: Vec<f64> = (0..data.n()).map(|i| x1[i].sin() + 0.5 * x2[i] * x2[i] + 0.5 * x3[i]).collect();
    let m1 = g.iter().map(|v| v + theta).collect();
    (g, m1, vec![0.5; data.n()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn three_hills_basics() {
        assert_eq!(three_hills_mean(0.0, 0.0), 0.0);
        let s = three_hills(200, 3).unwrap();
        let x1 = s.data.column("x1").unwrap();
        let x2 = s.data.column("x2").unwrap();
        assert!(x1.iter().chain(x2).all(|v| v.abs() < PI));
        for i in 0..5 {
            let a = fd(|t| three_hills_mean(t, x2[i]), x1[i]);
            let b = fd(|t| three_hills_mean(x1[i], t), x2[i]);
            assert!((a - s.d_x1[i]).abs() < 1e-6);
            assert!((b - s.d_x2[i]).abs() < 1e-6);
        }
        assert!(three_hills(9, 1).is_err());
    }

    #[test]
    fn nonlinear_surface_derivatives() {
        // independent symbolic form of the two-bump partials
        let oracle = |x1: f64, x2: f64| {
            let e1 = (-((x1 - 0.15).powi(2) + (x2 - 0.15).powi(2)) / 4.0).exp();
            let e2 = (-((x1 - 0.5).powi(2) + (x2 - 0.5).powi(2)) / 2.5).exp();
            (
                e1 + 2.5 * e2,
                e1 * (-(x1 - 0.15) / 2.0) + 2.5 * e2 * (-2.0 * (x1 - 0.5) / 2.5),
                e1 * (-(x2 - 0.15) / 2.0) + 2.5 * e2 * (-2.0 * (x2 - 0.5) / 2.5),
            )
        };
        for &(a, b) in &[(0.3, -1.2), (1.7, 0.4), (-0.8, 2.2), (0.15, 0.5)] {
            let (f, d1, d2) = fe_surface(FeForm::Nonlinear, a, b);
            let (g, e1, e2) = oracle(a, b);
            assert!((f - g).abs() < 1e-12);
            assert!((d1 - e1).abs() < 1e-10);
            assert!((d2 - e2).abs() < 1e-10);
        }
        assert_eq!(fe_surface(FeForm::Linear, 3.0, -1.0), (1.3, 0.5, 0.2));
    }

    #[test]
    fn fe_world_validation() {
        let mut rng = seeded(1);
        assert!(FeWorld::new(5, 3, 0.95, FeForm::Linear, &mut rng).is_err());
        assert!(FeWorld::new(5, 3, 0.94, FeForm::Linear, &mut rng).is_ok());
        assert!(FeWorld::new(1, 3, 0.0, FeForm::Linear, &mut rng).is_err());
        let (tr, te) = fe_dgp(4, 3, 0.3, FeForm::Nonlinear, 9).unwrap();
        assert_eq!(tr.data.n(), 12);
        assert_eq!(te.data.factor(GROUP_COLUMN).unwrap().n_levels(), 4);
    }

    #[test]
    fn coverage_grid_corners() {
        let (g, f) = coverage_grid(40).unwrap();
        assert_eq!(g.n(), 1600);
        assert_eq!(g.column("x").unwrap()[1599], 1.0);
        assert!((f[0] - bivariate_surface(0.0, 0.0)).abs() == 0.0);
    }
}
