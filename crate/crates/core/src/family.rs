use serde::{Deserialize, Serialize};

use crate::error::{GkrlsError, Result};

/// Linear-predictor bound for the logit link (separation guard).
pub const ETA_CLAMP: f64 = 30.0;

/// Outcome family with its canonical link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Gaussian,
    #[serde(alias = "binomial")]
    BinomialLogit,
    #[serde(alias = "poisson")]
    PoissonLog,
}

impl std::str::FromStr for Family {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "binomial" | "binomial_logit" | "logit" => Ok(Self::BinomialLogit),
            "poisson" | "poisson_log" => Ok(Self::PoissonLog),
            _ => Err(GkrlsError::InvalidArgument(format!("unknown family '{s}'"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::BinomialLogit => "binomial",
            Self::PoissonLog => "poisson",
        })
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        return 0.0;
    }
    if y < 256.0 {
        return (2..=(y as u64)).map(|k| (k as f64).ln()).sum();
    }
    // Stirling series for ln Γ(y+1)
    let x = y + 1.0;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x.powi(3))
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

impl Family {
    pub fn is_gaussian(self) -> bool {
        self == Family::Gaussian
    }

    pub fn linkinv(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::BinomialLogit => logistic(eta),
            Family::PoissonLog => eta.exp(),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::BinomialLogit => (mu / (1.0 - mu)).ln(),
            Family::PoissonLog => mu.ln(),
        }
    }

    /// dμ/dη.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::BinomialLogit => {
                let m = logistic(eta);
                m * (1.0 - m)
            }
            Family::PoissonLog => eta.exp(),
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::BinomialLogit => mu * (1.0 - mu),
            Family::PoissonLog => mu,
        }
    }

    /// Starting mean: binomial `(y+0.5)/2`, poisson `y+0.1`.
    pub fn init_mu(self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::BinomialLogit => (y + 0.5) / 2.0,
            Family::PoissonLog => y + 0.1,
        }
    }

    /// Clamp the linear predictor into the numerically safe range.
    pub fn clamp_eta(self, eta: f64) -> (f64, bool) {
        let bound = match self {
            Family::Gaussian => return (eta, false),
            Family::BinomialLogit => ETA_CLAMP,
            Family::PoissonLog => 700.0,
        };
        if eta.abs() > bound {
            (eta.signum() * bound, true)
        } else {
            (eta, false)
        }
    }

    pub fn validate(self, y: &[f64]) -> Result<()> {
        match self {
            Family::Gaussian => Ok(()),
            Family::BinomialLogit => match y.iter().position(|&v| v != 0.0 && v != 1.0) {
                Some(i) => Err(GkrlsError::Data(format!(
                    "binomial outcome must be 0 or 1; row {} has {}",
                    i + 1,
                    y[i]
                ))),
                None => Ok(()),
            },
            Family::PoissonLog => {
                match y.iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
                    Some(i) => Err(GkrlsError::Data(format!(
                        "poisson outcome must be a nonnegative integer; row {} has {}",
                        i + 1,
                        y[i]
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    /// Weighted deviance evaluated from the linear predictor.
    pub fn deviance(self, y: &[f64], eta: &[f64], w: &[f64]) -> f64 {
        let mut d = 0.0;
        for i in 0..y.len() {
            let (yi, e) = (y[i], eta[i]);
            d += w[i]
                * match self {
                    Family::Gaussian => (yi - e) * (yi - e),
                    Family::BinomialLogit => {
                        2.0 * (yi * softplus(-e) + (1.0 - yi) * softplus(e)
                            + xlogy(yi, yi)
                            + xlogy(1.0 - yi, 1.0 - yi))
                    }
                    Family::PoissonLog => {
                        let mu = e.exp();
                        2.0 * (xlogy(yi, yi) - yi * e - (yi - mu))
                    }
                };
        }
        d
    }

    /// Weighted log-likelihood (gaussian uses variance `scale/w_i`).
    pub fn log_likelihood(self, y: &[f64], eta: &[f64], w: &[f64], scale: f64) -> f64 {
        let mut l = 0.0;
        for i in 0..y.len() {
            let (yi, e) = (y[i], eta[i]);
            l += match self {
                Family::Gaussian => {
                    -0.5 * (2.0 * std::f64::consts::PI * scale / w[i]).ln()
                        - w[i] * (yi - e) * (yi - e) / (2.0 * scale)
                }
                Family::BinomialLogit => w[i] * (yi * e - softplus(e)),
                Family::PoissonLog => w[i] * (yi * e - e.exp() - ln_factorial(yi)),
            };
        }
        l
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn links_invert() {
        for f in [Family::Gaussian, Family::BinomialLogit, Family::PoissonLog] {
            for &eta in &[-2.0, -0.3, 0.0, 1.7] {
                assert!((f.link(f.linkinv(eta)) - eta).abs() < 1e-12);
                let h = 1e-6;
                let fd = (f.linkinv(eta + h) - f.linkinv(eta - h)) / (2.0 * h);
                assert!((fd - f.mu_eta(eta)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn deviance_is_twice_loglik_gap() {
        let y = [0.0, 1.0, 1.0, 0.0];
        let eta = [0.3, -0.2, 1.5, -2.0];
        let w = [1.0; 4];
        let f = Family::BinomialLogit;
        let dev = f.deviance(&y, &eta, &w);
        let ll = f.log_likelihood(&y, &eta, &w, 1.0);
        assert!((dev + 2.0 * ll).abs() < 1e-12);
        let yp = [0.0, 3.0, 1.0, 7.0];
        let f = Family::PoissonLog;
        let sat: Vec<f64> = yp.iter().map(|&v: &f64| if v > 0.0 { v.ln() } else { -50.0 }).collect();
        let gap = 2.0 * (f.log_likelihood(&yp, &sat, &w, 1.0) - f.log_likelihood(&yp, &eta, &w, 1.0));
        assert!((gap - f.deviance(&yp, &eta, &w)).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(Family::BinomialLogit.validate(&[0.0, 1.0, 2.0]).is_err());
        assert!(Family::PoissonLog.validate(&[0.0, 1.5]).is_err());
        assert!(Family::PoissonLog.validate(&[0.0, 3.0]).is_ok());
    }

    #[test]
    fn ln_factorial_matches_product() {
        assert!((ln_factorial(5.0) - 120f64.ln()).abs() < 1e-12);
        let direct: f64 = (2..=300).map(|k| (k as f64).ln()).sum();
        assert!((ln_factorial(300.0) - direct).abs() < 1e-9);
    }
}
