//! Summary statistics and the percentile bootstrap.

use gkrls_core::rng::seeded;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BOOTSTRAP: usize = 1000;

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Point estimate with a percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap of `stat` over resampled replicates.
///
/// The bounds are widened to include the point estimate when the
/// resampling distribution does not cover it.
pub fn bootstrap(values: &[f64], stat: impl Fn(&[f64]) -> f64, draws: usize, level: f64, seed: u64) -> Interval {
    let estimate = stat(values);
    if values.len() < 2 || draws == 0 {
        return Interval {
            estimate,
            lo: estimate,
            hi: estimate,
        };
    }
    let mut rng = seeded(seed);
    let n = values.len();
    let mut buf = vec![0.0; n];
    let stats: Vec<f64> = (0..draws)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.random_range(0..n)];
            }
            stat(&buf)
        })
        .collect();
    let a = (1.0 - level) / 2.0;
    Interval {
        estimate,
        lo: quantile(&stats, a).min(estimate),
        hi: quantile(&stats, 1.0 - a).max(estimate),
    }
}

/// Percentile bootstrap of a statistic computed from resampled indices `0..n`.
pub fn bootstrap_indices(n: usize, stat: impl Fn(&[usize]) -> f64, draws: usize, level: f64, seed: u64) -> Interval {
    let all: Vec<usize> = (0..n).collect();
    let estimate = stat(&all);
    if n < 2 || draws == 0 {
        return Interval {
            estimate,
            lo: estimate,
            hi: estimate,
        };
    }
    let mut rng = seeded(seed);
    let mut idx = vec![0; n];
    let stats: Vec<f64> = (0..draws)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .collect();
    let a = (1.0 - level) / 2.0;
    Interval {
        estimate,
        lo: quantile(&stats, a).min(estimate),
        hi: quantile(&stats, 1.0 - a).max(estimate),
    }
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn ols_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log(time)` on `log(n)`.
pub fn log_log_slope(n: &[f64], t: &[f64]) -> f64 {
    let lx: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = t.iter().map(|v| v.ln()).collect();
    ols_line(&lx, &ly).0
}

/// `k` log-spaced integers from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![lo.round() as usize];
    }
    (0..k)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp().round() as usize)
        .collect()
}
