//! Bound-constrained quasi-Newton minimization with finite-difference gradients.

#[derive(Debug, Clone)]
pub(crate) struct MinimizeOptions {
    pub lower: f64,
    pub upper: f64,
    pub fd_step: f64,
    pub max_iter: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    pub max_step: f64,
    /// Golden-section refinement along each coordinate after convergence.
    pub polish: bool,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            lower: -20.0,
            upper: 25.0,
            fd_step: 1e-4,
            max_iter: 200,
            x_tol: 1e-4,
            f_tol: 1e-6,
            max_step: 5.0,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MinimizeOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Accepted iterates `(x, f(x))`.
    pub path: Vec<(Vec<f64>, f64)>,
}

struct Counted<'a> {
    f: &'a mut dyn FnMut(&[f64]) -> f64,
    evals: usize,
}

impl Counted<'_> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn gradient(f: &mut Counted<'_>, x: &[f64], fx: f64, o: &MinimizeOptions) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = o.fd_step;
        let up = x[i] + h <= o.upper;
        let down = x[i] - h >= o.lower;
        g[i] = match (up, down) {
            (true, true) => {
                xp[i] = x[i] + h;
                let fp = f.eval(&xp);
                xp[i] = x[i] - h;
                let fm = f.eval(&xp);
                (fp - fm) / (2.0 * h)
            }
            (true, false) => {
                xp[i] = x[i] + h;
                (f.eval(&xp) - fx) / h
            }
            _ => {
                xp[i] = x[i] - h;
                (fx - f.eval(&xp)) / h
            }
        };
        if !g[i].is_finite() {
            g[i] = 0.0;
        }
        xp[i] = x[i];
    }
    g
}

fn clamp(x: &mut [f64], o: &MinimizeOptions) {
    for v in x {
        *v = v.clamp(o.lower, o.upper);
    }
}

fn golden(f: &mut Counted<'_>, x: &mut [f64], fx: &mut f64, i: usize, half: f64, o: &MinimizeOptions) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = (x[i] - half).max(o.lower);
    let mut b = (x[i] + half).min(o.upper);
    let mut xt = x.to_vec();
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    xt[i] = c;
    let mut fc = f.eval(&xt);
    xt[i] = d;
    let mut fd = f.eval(&xt);
    for _ in 0..32 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            xt[i] = c;
            fc = f.eval(&xt);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            xt[i] = d;
            fd = f.eval(&xt);
        }
    }
    let (xm, fm) = if fc < fd { (c, fc) } else { (d, fd) };
    if fm < *fx {
        x[i] = xm;
        *fx = fm;
    }
}

/// Newton steps on the coordinates away from the bounds, with central
/// differences: a fine step for the gradient, a coarser one for the Hessian.
/// Near the optimum `f` is flat to within rounding, so comparing values
/// cannot place the minimizer closer than about `sqrt(ε)`; the gradient root can.
fn newton_refine(f: &mut Counted<'_>, x: &mut [f64], fx: &mut f64, o: &MinimizeOptions) {
    const HG: f64 = 1e-5;
    const HH: f64 = 1e-3;
    for _ in 0..4 {
        let free: Vec<usize> = (0..x.len())
            .filter(|&i| x[i] - HH > o.lower && x[i] + HH < o.upper)
            .collect();
        let k = free.len();
        if k == 0 {
            return;
        }
        let mut xt = x.to_vec();
        let mut at = |f: &mut Counted<'_>, steps: &[(usize, f64)]| {
            xt.copy_from_slice(x);
            for &(i, h) in steps {
                xt[i] += h;
            }
            f.eval(&xt)
        };
        let g: Vec<f64> = free
            .iter()
            .map(|&i| (at(f, &[(i, HG)]) - at(f, &[(i, -HG)])) / (2.0 * HG))
            .collect();
        let mut h = vec![vec![0.0; k]; k];
        for a in 0..k {
            let i = free[a];
            h[a][a] = (at(f, &[(i, HH)]) - 2.0 * *fx + at(f, &[(i, -HH)])) / (HH * HH);
            for b in 0..a {
                let j = free[b];
                let v = (at(f, &[(i, HH), (j, HH)]) - at(f, &[(i, HH), (j, -HH)]) - at(f, &[(i, -HH), (j, HH)])
                    + at(f, &[(i, -HH), (j, -HH)]))
                    / (4.0 * HH * HH);
                h[a][b] = v;
                h[b][a] = v;
            }
        }
        let Some(step) = solve_spd(&h, &g) else {
            return;
        };
        let smax = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !smax.is_finite() || smax > 0.05 {
            return;
        }
        let mut xn = x.to_vec();
        for (a, &i) in free.iter().enumerate() {
            xn[i] -= step[a];
        }
        clamp(&mut xn, o);
        let fnew = f.eval(&xn);
        if !(fnew <= *fx + 8.0 * f64::EPSILON * fx.abs()) {
            return;
        }
        x.copy_from_slice(&xn);
        *fx = fnew;
        if smax < 1e-10 {
            return;
        }
    }
}

/// Cholesky solve of a small system; `None` unless positive definite.
fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Minimize `f` from `x0` inside the box `[lower, upper]^J`.
pub(crate) fn minimize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    o: &MinimizeOptions,
) -> MinimizeOutcome {
    let n = x0.len();
    let mut f = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    clamp(&mut x, o);
    let mut fx = f.eval(&x);
    let mut path = vec![(x.clone(), fx)];
    if n == 0 || !fx.is_finite() {
        return MinimizeOutcome {
            x,
            value: fx,
            iterations: 0,
            evaluations: f.evals,
            converged: n == 0,
            path,
        };
    }
    let mut hinv = vec![vec![0.0; n]; n];
    let reset = |h: &mut Vec<Vec<f64>>| {
        for (i, row) in h.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i == j) as u8 as f64;
            }
        }
    };
    reset(&mut hinv);
    let mut g = gradient(&mut f, &x, fx, o);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=o.max_iter {
        iterations = it;
        let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| hinv[i][j] * g[j]).sum::<f64>()).collect();
        // drop components pushing through an active bound
        for i in 0..n {
            if (x[i] <= o.lower && d[i] < 0.0) || (x[i] >= o.upper && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            reset(&mut hinv);
            d = g.iter().map(|v| -v).collect();
            for i in 0..n {
                if (x[i] <= o.lower && d[i] < 0.0) || (x[i] >= o.upper && d[i] > 0.0) {
                    d[i] = 0.0;
                }
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        if slope.abs() < 1e-14 {
            converged = true;
            break;
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax > o.max_step {
            for v in &mut d {
                *v *= o.max_step / dmax;
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            clamp(&mut xn, o);
            let fnew = f.eval(&xn);
            let dec: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if fnew.is_finite() && fnew <= fx + 1e-4 * dec.min(0.0) {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no descent along the search direction: treat as stationary
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let improvement = fx - fnew;
        let gn = gradient(&mut f, &xn, fnew, o);
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        x = xn;
        fx = fnew;
        g = gn;
        path.push((x.clone(), fx));
        let smax = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if smax < o.x_tol && improvement < o.f_tol {
            converged = true;
            break;
        }
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-10 {
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[i][j] * yv[j]).sum()).collect();
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    hinv[i][j] += (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
    }
    if o.polish {
        let before = fx;
        for i in 0..n {
            golden(&mut f, &mut x, &mut fx, i, 0.01, o);
        }
        if n <= 3 {
            newton_refine(&mut f, &mut x, &mut fx, o);
        }
        if fx < before {
            path.push((x.clone(), fx));
        }
    }
    MinimizeOutcome {
        x,
        value: fx,
        iterations,
        evaluations: f.evals,
        converged,
        path,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let mut f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 0.5 * x[0] * x[1];
        let out = minimize(&mut f, &[0.0, 0.0], &MinimizeOptions::default());
        assert!(out.converged);
        // stationary point of the quadratic
        let det = 2.0 * 6.0 - 0.25;
        let x0 = (3.0 * 6.0 + 0.5 * 12.0) / det;
        let x1 = (2.0 * -12.0 - 0.5 * 3.0) / det;
        assert!((out.x[0] - x0).abs() < 1e-4, "{:?} vs {x0}", out.x);
        assert!((out.x[1] - x1).abs() < 1e-4);
    }

    #[test]
    fn respects_bounds() {
        let mut f = |x: &[f64]| -x[0];
        let out = minimize(&mut f, &[0.0], &MinimizeOptions::default());
        assert_eq!(out.x[0], 25.0);
    }

    #[test]
    fn rosenbrock() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let o = MinimizeOptions {
            x_tol: 1e-8,
            f_tol: 1e-12,
            max_step: 1.0,
            ..Default::default()
        };
        let out = minimize(&mut f, &[-1.2, 1.0], &o);
        assert!((out.x[0] - 1.0).abs() < 1e-3 && (out.x[1] - 1.0).abs() < 2e-3, "{:?}", out.x);
    }
}
