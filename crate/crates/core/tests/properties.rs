use faer::Mat;
use gkrls_core::data::{apply_standardizer, fit_standardizer, Dataset, StandardizeKind};
use gkrls_core::design::{build_design, KernelDefaults};
use gkrls_core::effects::{ame, EffectOptions};
use gkrls_core::family::Family;
use gkrls_core::inference::{min_relative_eigen, Meat};
use gkrls_core::kernel::{kernel_matrix, SketchMethod};
use gkrls_core::linalg::{mat_vec, max_abs_diff};
use gkrls_core::metalearn::{make_folds_n, trim_propensity};
use gkrls_core::model::{fit_model, FitOptions};
use gkrls_core::persistence::{decode_model, encode_model};
use gkrls_core::reml::Smoothing;
use gkrls_core::rng::seeded;
use gkrls_core::solver::{pirls, PirlsOptions, Scale};
use gkrls_core::spec::parse_spec;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn random_matrix(seed: u64, n: usize, p: usize) -> Mat<f64> {
    let z = normals(seed, n * p);
    // mixing so the columns are correlated
    Mat::from_fn(n, p, |i, j| (0..=j).map(|k| z[i * p + k] * (1.0 + k as f64) * 0.5).sum::<f64>() + j as f64)
}

fn smooth_data(seed: u64, n: usize) -> Dataset {
    let x1 = normals(seed, n);
    let x2 = normals(seed ^ 0xABCD, n);
    let e = normals(seed ^ 0x1234, n);
    let y: Vec<f64> = (0..n).map(|i| x1[i].sin() + 0.5 * x1[i] * x2[i] + 0.3 * e[i]).collect();
    let g: Vec<String> = (0..n).map(|i| format!("g{}", i % 5)).collect();
    Dataset::builder("y", y)
        .numeric("x1", x1)
        .numeric("x2", x2)
        .cluster("g", &g)
        .build()
        .unwrap()
}

fn fixed_lambda(lambda: Vec<f64>) -> FitOptions {
    FitOptions {
        smoothing: Smoothing::Fixed(lambda),
        ..FitOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn whitening_round_trips(seed in any::<u64>(), n in 8usize..40, p in 1usize..4) {
        let x = random_matrix(seed, n, p);
        let t = fit_standardizer(x.as_ref(), StandardizeKind::Mahalanobis).unwrap();
        prop_assert_eq!(t.rank, p);
        let z = apply_standardizer(&t, x.as_ref()).unwrap();
        let back = t.restore(z.as_ref());
        prop_assert!(max_abs_diff(back.as_ref(), x.as_ref()) < 1e-8);
    }

    #[test]
    fn standardizer_is_deterministic(seed in any::<u64>(), n in 5usize..30) {
        let x = random_matrix(seed, n, 3);
        for kind in [StandardizeKind::Scale, StandardizeKind::Mahalanobis] {
            let a = fit_standardizer(x.as_ref(), kind).unwrap();
            let b = fit_standardizer(x.as_ref(), kind).unwrap();
            prop_assert_eq!(&a.center, &b.center);
            prop_assert!(max_abs_diff(a.transform.as_ref(), b.transform.as_ref()) == 0.0);
        }
    }

    #[test]
    fn whitened_kernel_ignores_units(seed in any::<u64>(), n in 6usize..30, factor in 1e-3f64..1e3, col in 0usize..2) {
        let x = random_matrix(seed, n, 2);
        let mut scaled = x.clone();
        for i in 0..n {
            scaled[(i, col)] *= factor;
        }
        let whiten = |m: &Mat<f64>| {
            let t = fit_standardizer(m.as_ref(), StandardizeKind::Mahalanobis).unwrap();
            apply_standardizer(&t, m.as_ref()).unwrap()
        };
        let (za, zb) = (whiten(&x), whiten(&scaled));
        for k in 0..za.ncols() {
            let sign = if za.col(k).iter().zip(zb.col(k).iter()).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                prop_assert!((za[(i, k)] - sign * zb[(i, k)]).abs() < 1e-10);
            }
        }
        let ka = kernel_matrix(za.as_ref(), za.as_ref(), 2.0);
        let kb = kernel_matrix(zb.as_ref(), zb.as_ref(), 2.0);
        prop_assert!(max_abs_diff(ka.as_ref(), kb.as_ref()) < 1e-10);
    }

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal(seed in any::<u64>(), n in 1usize..25, p in 1usize..4, b in 0.1f64..10.0) {
        let x = random_matrix(seed, n, p);
        let k = kernel_matrix(x.as_ref(), x.as_ref(), b);
        for i in 0..n {
            prop_assert_eq!(k[(i, i)], 1.0);
            for j in 0..n {
                prop_assert_eq!(k[(i, j)], k[(j, i)]);
                prop_assert!(k[(i, j)] > 0.0 && k[(i, j)] <= 1.0);
            }
        }
    }

    #[test]
    fn folds_partition_rows(seed in any::<u64>(), n in 10usize..200, k in 2usize..6) {
        prop_assume!(n >= 2 * k);
        let plan = make_folds_n(n, k, None, seed).unwrap();
        prop_assert_eq!(plan.n(), n);
        let mut seen = vec![0usize; n];
        for f in 0..k {
            let test = plan.test_rows(f);
            let train = plan.train_rows(f);
            prop_assert!(!test.is_empty());
            prop_assert_eq!(test.len() + train.len(), n);
            for r in test {
                seen[r] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = plan.sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn stratified_folds_keep_groups_whole(seed in any::<u64>(), n in 20usize..150, groups in 4usize..12, k in 2usize..4) {
        prop_assume!(groups >= k);
        let codes: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % groups).collect();
        let plan = make_folds_n(n, k, Some(&codes), seed).unwrap();
        for g in 0..groups {
            let folds: Vec<usize> = (0..n).filter(|&i| codes[i] == g).map(|i| plan.assignment[i]).collect();
            prop_assert!(folds.windows(2).all(|w| w[0] == w[1]));
        }
        prop_assert_eq!(plan.assignment.iter().filter(|&&a| a < k).count(), n);
    }

    #[test]
    fn wider_trim_never_clamps_more(
        e in prop::collection::vec(0.0f64..1.0, 1..200),
        lo in 0.01f64..0.2,
        hi in 0.8f64..0.99,
        widen_lo in 0.0f64..1.0,
        widen_hi in 0.0f64..1.0,
    ) {
        let mut narrow = e.clone();
        let mut wide = e.clone();
        let c_narrow = trim_propensity(&mut narrow, (lo, hi));
        let c_wide = trim_propensity(&mut wide, (lo * widen_lo, hi + (1.0 - hi) * widen_hi));
        prop_assert!(c_wide <= c_narrow);
        prop_assert!(c_narrow <= e.len());
        prop_assert!(narrow.iter().all(|&v| v >= lo && v <= hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn variance_estimates_are_psd(seed in any::<u64>(), n in 30usize..80, lambda in 1e-3f64..10.0) {
        let d = smooth_data(seed, n);
        let spec = parse_spec("y ~ fixed(x1) + kernel(x1, x2; sketch=subsample, size=12)").unwrap();
        let m = fit_model(&d, &spec, &FitOptions { seed, ..fixed_lambda(vec![lambda]) }).unwrap();
        let codes = d.cluster().unwrap().codes.clone();
        let estimates = [
            m.variance_bayes().unwrap(),
            m.variance_freq(Meat::Model { scale: m.scale }).unwrap(),
            m.variance_freq(Meat::Hc).unwrap(),
            m.variance_freq(Meat::Cluster(&codes)).unwrap(),
        ];
        for v in &estimates {
            prop_assert!(min_relative_eigen(&v.reduced).unwrap() > -1e-10);
            prop_assert!(max_abs_diff(v.reduced.as_ref(), v.reduced.transpose()) == 0.0);
        }
    }

    #[test]
    fn huge_penalty_shrinks_kernel_weights(seed in any::<u64>(), n in 20usize..60) {
        let d = smooth_data(seed, n);
        let spec = parse_spec("y ~ fixed(x1) + kernel(x1, x2; sketch=none)").unwrap();
        let m = fit_model(&d, &spec, &fixed_lambda(vec![1e12])).unwrap();
        let (_, alphas) = m.coefficients();
        prop_assert!(alphas[0].iter().all(|a| a.abs() < 1e-6));
    }

    #[test]
    fn solution_zeroes_the_numerical_gradient(seed in any::<u64>(), n in 20usize..50, lambda in 0.05f64..5.0, fam in 0usize..3) {
        let d = smooth_data(seed, n);
        let raw = d.outcome();
        let family = [Family::Gaussian, Family::BinomialLogit, Family::PoissonLog][fam];
        let y: Vec<f64> = match family {
            Family::Gaussian => raw.to_vec(),
            Family::BinomialLogit => raw.iter().map(|&v| (v > 0.2) as u8 as f64).collect(),
            Family::PoissonLog => raw.iter().map(|&v| (v + 1.5).max(0.0).round()).collect(),
        };
        prop_assume!(y.iter().any(|&v| v != y[0]));
        let spec = parse_spec("y ~ fixed(x1) + kernel(x1, x2; sketch=none)").unwrap();
        let (pd, _, _) = build_design(&d, &spec, &KernelDefaults::default(), 1).unwrap();
        let w = vec![1.0; n];
        let f = pirls(&pd, &y, &w, &[lambda], family, &PirlsOptions::default(), None).unwrap();
        prop_assert!(f.converged);
        for pair in f.deviance_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-10 * (1.0 + pair[0].abs()));
        }
        let pen = pd.penalty_diag(&[lambda]);
        let objective = |c: &[f64]| {
            let eta = mat_vec(pd.matrix.as_ref(), c);
            let p: f64 = c.iter().zip(&pen).map(|(c, l)| l * c * c).sum();
            0.5 * (family.deviance(&y, &eta, &w) + p)
        };
        let h = 1e-6;
        let mut c = f.coef.clone();
        for j in 0..c.len() {
            let base = c[j];
            c[j] = base + h;
            let up = objective(&c);
            c[j] = base - h;
            let dn = objective(&c);
            c[j] = base;
            prop_assert!(((up - dn) / (2.0 * h)).abs() < 1e-5, "coordinate {j}");
        }
    }

    #[test]
    fn ame_is_the_mean_of_row_effects(seed in any::<u64>(), n in 20usize..60) {
        let d = smooth_data(seed, n);
        let spec = parse_spec("y ~ fixed(x1) + kernel(x1, x2)").unwrap();
        let m = fit_model(&d, &spec, &FitOptions { seed, ..FitOptions::default() }).unwrap();
        let est = ame(&m, &d, "x1", &EffectOptions { step: None, individual: true }).unwrap();
        let rows = &est.individual.as_ref().unwrap()[0];
        prop_assert_eq!(rows.len(), n);
        prop_assert_eq!(est.estimate[0], rows.iter().sum::<f64>() / n as f64);
        prop_assert!(est.se[0] >= 0.0);
    }

    #[test]
    fn loaded_model_predicts_identically(seed in any::<u64>(), n in 20usize..60, method in 0usize..3) {
        let d = smooth_data(seed, n);
        let sketch = [SketchMethod::None, SketchMethod::Subsample, SketchMethod::Gaussian][method];
        let spec = parse_spec(&format!("y ~ fixed(x2) + kernel(x1, x2; sketch={sketch}, size=10)")).unwrap();
        let m = fit_model(&d, &spec, &FitOptions { seed, ..FitOptions::default() }).unwrap();
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        let fresh = smooth_data(seed.wrapping_add(1), 15);
        let a = m.predict(&fresh, Scale::Response).unwrap();
        let b = back.predict(&fresh, Scale::Response).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn rescaled_variable_rescales_the_ame() {
    let d = smooth_data(5, 60);
    let spec = parse_spec("y ~ kernel(x1, x2)").unwrap();
    let base = fit_model(&d, &spec, &FitOptions::default()).unwrap();
    let a0 = ame(&base, &d, "x1", &EffectOptions::default()).unwrap().estimate[0];
    let mut rng = seeded(9);
    for _ in 0..4 {
        let factor: f64 = rng.random_range(0.05..20.0);
        let x: Vec<f64> = d.column("x1").unwrap().iter().map(|v| v / factor).collect();
        let dd = d.with_column("x1", &x).unwrap();
        let m = fit_model(&dd, &spec, &FitOptions::default()).unwrap();
        let a = ame(&m, &dd, "x1", &EffectOptions::default()).unwrap().estimate[0];
        assert!((a - factor * a0).abs() <= 1e-5 * (factor * a0).abs().max(1.0), "{factor}: {a} vs {}", factor * a0);
    }
}
