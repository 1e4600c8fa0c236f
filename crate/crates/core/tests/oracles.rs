use faer::linalg::solvers::Solve;
use faer::Mat;
use gkrls_core::data::Dataset;
use gkrls_core::design::{build_design, KernelDefaults, PenalizedDesign};
use gkrls_core::effects::{predicted_grid, EffectOptions};
use gkrls_core::family::Family;
use gkrls_core::inference::Meat;
use gkrls_core::linalg::mat_vec;
use gkrls_core::metalearn::{crossfit_nuisance, make_folds_n, rlearner_from_nuisance};
use gkrls_core::model::{fit_model, FitOptions};
use gkrls_core::reml::{optimize_reml, OptimizeOptions, RemlProblem, ScaleChoice, Smoothing};
use gkrls_core::rng::seeded;
use gkrls_core::solver::Scale;
use gkrls_core::spec::parse_spec;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn inverse(a: &Mat<f64>) -> Mat<f64> {
    a.partial_piv_lu().solve(Mat::<f64>::identity(a.nrows(), a.ncols()))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs_mat(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

fn fixed(lambda: Vec<f64>) -> FitOptions {
    FitOptions {
        smoothing: Smoothing::Fixed(lambda),
        ..FitOptions::default()
    }
}

/// Points on a jittered 6×5 lattice, so the kernel is well conditioned.
fn lattice(seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut rng = seeded(seed);
    let pts: Vec<[f64; 2]> = (0..30)
        .map(|i| {
            [
                (i % 6) as f64 + rng.random_range(-0.15..0.15),
                (i / 6) as f64 + rng.random_range(-0.15..0.15),
            ]
        })
        .collect();
    let y = pts
        .iter()
        .map(|p| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (p[0] * 0.8).sin() + 0.3 * p[1] + 0.2 * z
        })
        .collect();
    (pts, y)
}

fn lattice_data(pts: &[[f64; 2]], y: &[f64]) -> Dataset {
    Dataset::builder("y", y.to_vec())
        .numeric("x1", pts.iter().map(|p| p[0]).collect())
        .numeric("x2", pts.iter().map(|p| p[1]).collect())
        .build()
        .unwrap()
}

fn lattice_kernel(pts: &[[f64; 2]], bandwidth: f64) -> Mat<f64> {
    let n = pts.len();
    Mat::from_fn(n, n, |i, j| {
        let d = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
        (-d / bandwidth).exp()
    })
}

const LATTICE_SPEC: &str = "y ~ 0 + kernel(x1, x2; sketch=none, standardize=none, bandwidth=1)";

#[test]
fn bayes_variance_matches_kernel_formula() {
    for (seed, lambda) in [(1u64, 0.05), (2, 0.5), (3, 3.0)] {
        let (pts, y) = lattice(seed);
        let m = fit_model(&lattice_data(&pts, &y), &parse_spec(LATTICE_SPEC).unwrap(), &fixed(vec![lambda])).unwrap();
        let design = &m.training.as_ref().unwrap().design;
        let ours = m.variance_bayes().unwrap().full(design);
        let k = lattice_kernel(&pts, 1.0);
        let mut h = &k * &k;
        h += &k * lambda;
        let oracle = inverse(&h) * m.scale;
        let top = (0..30).map(|i| oracle[(i, i)]).fold(0.0, f64::max);
        assert!(max_abs_mat(&ours, &oracle) <= 1e-8 * top, "λ = {lambda}");
    }
}

#[test]
fn legacy_variance_matches_kernel_formula() {
    for (seed, lambda) in [(4u64, 0.1), (5, 1.0)] {
        let (pts, y) = lattice(seed);
        let m = fit_model(&lattice_data(&pts, &y), &parse_spec(LATTICE_SPEC).unwrap(), &fixed(vec![lambda])).unwrap();
        let design = &m.training.as_ref().unwrap().design;
        let ours = m.variance_hh().unwrap().full(design);
        let mut kl = lattice_kernel(&pts, 1.0);
        for i in 0..30 {
            kl[(i, i)] += lambda;
        }
        let inv = inverse(&kl);
        let oracle = &inv * &inv * m.scale;
        let top = (0..30).map(|i| oracle[(i, i)]).fold(0.0, f64::max);
        assert!(max_abs_mat(&ours, &oracle) <= 1e-8 * top, "λ = {lambda}");
    }
}

fn linear_data(n: usize, seed: u64) -> Dataset {
    let x1 = normals(seed, n);
    let x2 = normals(seed + 1, n);
    let e = normals(seed + 2, n);
    let y: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * x1[i] - x2[i] + 0.5 * x1[i].sin() + e[i]).collect();
    Dataset::builder("y", y).numeric("x1", x1).numeric("x2", x2).build().unwrap()
}

#[test]
fn unpenalized_bayes_and_model_sandwich_coincide() {
    let d = linear_data(80, 10);
    let m = fit_model(&d, &parse_spec("y ~ fixed(x1, x2)").unwrap(), &FitOptions::default()).unwrap();
    let vb = m.variance_bayes().unwrap().reduced;
    let vf = m.variance_freq(Meat::Model { scale: m.scale }).unwrap().reduced;
    assert!(max_abs_mat(&vb, &vf) <= 1e-10);
}

#[test]
fn contrast_variance_matches_reparameterized_fit() {
    // y ~ b1·x1 + b2·x2 equals (b1+b2)·x1 + b2·(x2 − x1), so the coefficient
    // on x1 in the second fit is the contrast b1 + b2 of the first.
    let d = linear_data(70, 20);
    let (x1, x2) = (d.column("x1").unwrap(), d.column("x2").unwrap());
    let d2 = Dataset::builder("y", d.outcome().to_vec())
        .numeric("x1", x1.to_vec())
        .numeric("x2", x2.to_vec())
        .numeric("dx", (0..70).map(|i| x2[i] - x1[i]).collect())
        .build()
        .unwrap();
    let opts = FitOptions {
        seed: 3,
        ..fixed(vec![0.7])
    };
    let a = fit_model(&d2, &parse_spec("y ~ fixed(x1, x2) + kernel(x1; sketch=none)").unwrap(), &opts).unwrap();
    let b = fit_model(&d2, &parse_spec("y ~ fixed(x1, dx) + kernel(x1; sketch=none)").unwrap(), &opts).unwrap();
    let names = a.fixed_names();
    let i1 = names.iter().position(|n| n == "x1").unwrap();
    let i2 = names.iter().position(|n| n == "x2").unwrap();
    let mut c = vec![0.0; a.coef.len()];
    c[i1] = 1.0;
    c[i2] = 1.0;
    let from_contrast = a.variance.quad_form(&c);
    let j1 = b.fixed_names().iter().position(|n| n == "x1").unwrap();
    let from_refit = b.variance.reduced[(j1, j1)];
    assert!((a.coef[i1] + a.coef[i2] - b.coef[j1]).abs() < 1e-8);
    assert!((from_contrast - from_refit).abs() <= 1e-6 * from_refit);
}

#[test]
fn grid_se_at_a_training_row_matches_propagated_variance() {
    let d = linear_data(60, 30);
    let spec = parse_spec("y ~ fixed(x1) + kernel(x1, x2)").unwrap();
    let m = fit_model(&d, &spec, &FitOptions::default()).unwrap();
    for row in [0usize, 17, 59] {
        let one = d.subset(&[row]);
        let x = one.column("x1").unwrap()[0];
        let est = predicted_grid(&m, &one, "x1", &[x], &EffectOptions::default()).unwrap();
        let a = m.design_rows(&one).unwrap();
        let g: Vec<f64> = (0..a.ncols()).map(|j| a[(0, j)]).collect();
        let se = m.variance.quad_form(&g).sqrt();
        assert!((est.se[0] - se).abs() <= 1e-10, "row {row}");
        assert!((est.estimate[0] - m.fitted().unwrap()[row]).abs() <= 1e-10);
    }
}

#[test]
fn enormous_penalty_recovers_the_fixed_effects_fit() {
    let d = linear_data(60, 40);
    let lin = fit_model(&d, &parse_spec("y ~ fixed(x1, x2)").unwrap(), &FitOptions::default()).unwrap();
    let pen = fit_model(
        &d,
        &parse_spec("y ~ fixed(x1, x2) + kernel(x1, x2; sketch=none)").unwrap(),
        &fixed(vec![1e10]),
    )
    .unwrap();
    assert!(max_abs(&lin.fitted().unwrap(), &pen.fitted().unwrap()) < 1e-4);
    let flat = fit_model(&d, &parse_spec("y ~ kernel(x1, x2; sketch=none)").unwrap(), &fixed(vec![1e10])).unwrap();
    let mean = d.outcome().iter().sum::<f64>() / 60.0;
    assert!(flat.fitted().unwrap().iter().all(|f| (f - mean).abs() < 1e-4));
}

#[test]
fn penalized_term_order_does_not_change_the_fit() {
    let d = linear_data(80, 50);
    let ab = parse_spec("y ~ fixed(x1) + kernel(x1; sketch=none) + kernel(x2; sketch=none)").unwrap();
    let ba = parse_spec("y ~ fixed(x1) + kernel(x2; sketch=none) + kernel(x1; sketch=none)").unwrap();
    let m1 = fit_model(&d, &ab, &fixed(vec![0.3, 4.0])).unwrap();
    let m2 = fit_model(&d, &ba, &fixed(vec![4.0, 0.3])).unwrap();
    assert!(max_abs(&m1.fitted().unwrap(), &m2.fitted().unwrap()) < 1e-8);
    let (_, a1) = m1.coefficients();
    let (_, a2) = m2.coefficients();
    assert!(max_abs(&a1[0], &a2[1]) < 1e-6 && max_abs(&a1[1], &a2[0]) < 1e-6);

    let r1 = fit_model(&d, &ab, &FitOptions::default()).unwrap();
    let r2 = fit_model(&d, &ba, &FitOptions::default()).unwrap();
    assert!((r1.lambda[0] - r2.lambda[1]).abs() <= 1e-4 * r1.lambda[0]);
    assert!((r1.lambda[1] - r2.lambda[0]).abs() <= 1e-4 * r1.lambda[1]);
    let gap = max_abs(&r1.fitted().unwrap(), &r2.fitted().unwrap());
    assert!(gap < 1e-8, "{gap:e} {:?} {:?}", r1.lambda, r2.lambda);
    let (c1, c2) = (r1.diagnostics.criterion.unwrap(), r2.diagnostics.criterion.unwrap());
    assert!((c1 - c2).abs() < 1e-8 * c1.abs().max(1.0));
}

fn rescaled(design: &PenalizedDesign, factor: f64) -> PenalizedDesign {
    let mut out = design.clone();
    for b in &design.blocks {
        for j in b.offset..b.offset + b.rank {
            for i in 0..design.n() {
                out.matrix[(i, j)] *= factor;
            }
        }
    }
    out
}

#[test]
fn halving_the_penalty_leaves_the_optimal_fit_unchanged() {
    let d = linear_data(120, 60);
    let spec = parse_spec("y ~ fixed(x1) + kernel(x1, x2; sketch=none)").unwrap();
    let (pd, _, _) = build_design(&d, &spec, &KernelDefaults::default(), 1).unwrap();
    // a penalty S/2 in the identity-penalized basis is a √2 column scaling
    let half = rescaled(&pd, 2f64.sqrt());
    let w = vec![1.0; d.n()];
    let y = d.outcome();
    let opts = OptimizeOptions::default();
    let p1 = RemlProblem::new(&pd, y, &w, Family::Gaussian).unwrap();
    let p2 = RemlProblem::new(&half, y, &w, Family::Gaussian).unwrap();
    let s1 = optimize_reml(&p1, &opts).unwrap();
    let s2 = optimize_reml(&p2, &opts).unwrap();
    assert!((s2.lambda[0] / s1.lambda[0] - 2.0).abs() < 1e-3, "{:?} {:?}", s1.lambda, s2.lambda);
    assert!(max_abs(&s1.fit.mu, &s2.fit.mu) < 1e-6);
}

#[test]
fn criterion_derivative_is_stable_under_step_halving() {
    let d = linear_data(90, 70);
    let spec = parse_spec("y ~ fixed(x1) + kernel(x1; sketch=none) + kernel(x2; sketch=none)").unwrap();
    let (pd, _, _) = build_design(&d, &spec, &KernelDefaults::default(), 1).unwrap();
    let w = vec![1.0; d.n()];
    let p = RemlProblem::new(&pd, d.outcome(), &w, Family::Gaussian).unwrap();
    let f = |rho: &[f64]| p.criterion(rho, ScaleChoice::Profile).unwrap().value;
    for rho in [[0.0, 0.0], [-2.0, 1.5], [2.0, -1.0]] {
        for k in 0..2 {
            let diff = |h: f64| {
                let mut up = rho;
                let mut dn = rho;
                up[k] += h;
                dn[k] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            };
            let (g1, g2) = (diff(1e-3), diff(5e-4));
            assert!((g1 - g2).abs() <= 1e-4 * g2.abs().max(1.0), "{rho:?}[{k}]: {g1} vs {g2}");
        }
    }
}

#[test]
fn crossfit_matches_a_manual_fold_loop() {
    let d = linear_data(100, 80);
    let spec = parse_spec("y ~ fixed(x1, x2)").unwrap();
    let plan = make_folds_n(100, 5, None, 9).unwrap();
    let opts = FitOptions::default();
    let cf = crossfit_nuisance(&d, &spec, &opts, &plan).unwrap();
    let mut manual = vec![f64::NAN; 100];
    for f in 0..5 {
        let test = plan.test_rows(f);
        let m = fit_model(&d.subset(&plan.train_rows(f)), &spec, &opts).unwrap();
        let p = m.predict(&d.subset(&test), Scale::Response).unwrap();
        for (r, v) in test.into_iter().zip(p) {
            manual[r] = v;
        }
    }
    assert!(max_abs(&cf.predictions, &manual) < 1e-12);
    for (f, rows) in cf.trained_on.iter().enumerate() {
        assert_eq!(rows, &plan.train_rows(f));
    }
}

#[test]
fn balanced_rlearner_is_an_unweighted_transformed_fit() {
    let x = [0.3, -1.2, 0.8, 2.0, -0.4, 1.1, -0.9, 0.1];
    let y = [1.0, 0.2, 2.1, 3.5, -0.3, 1.9, 0.4, 0.8];
    let w = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let m_hat = [0.7, 0.1, 1.5, 2.4, 0.0, 1.2, 0.3, 0.6];
    let e_hat = [0.5; 8];
    let d = Dataset::builder("y", y.to_vec()).numeric("x", x.to_vec()).build().unwrap();
    let spec = parse_spec("y ~ fixed(x)").unwrap();
    let plan = make_folds_n(8, 2, None, 4).unwrap();
    let est = rlearner_from_nuisance(&d, &w, &m_hat, &e_hat, &spec, &plan, &FitOptions::default()).unwrap();

    let transformed: Vec<f64> = (0..8).map(|i| 2.0 * (y[i] - m_hat[i]) * (2.0 * w[i] - 1.0)).collect();
    let t = Dataset::builder("t", transformed).numeric("x", x.to_vec()).build().unwrap();
    let plain = fit_model(&t, &parse_spec("t ~ fixed(x)").unwrap(), &FitOptions::default()).unwrap();
    let rows = plain.design_rows(&t).unwrap();
    let tau = mat_vec(rows.as_ref(), &plain.coef);
    assert!(max_abs(est.tau_full.as_ref().unwrap(), &tau) < 1e-10);
    assert_eq!(est.excluded_n, 0);
}
