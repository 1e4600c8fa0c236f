use gkrls_core::kernel::SketchMethod;
use gkrls_simlab::causal::{run_causal_study, CausalMethod, CausalStudyConfig};
use gkrls_simlab::coverage::{run_coverage, CoverageConfig, CoverageMethod};
use gkrls_simlab::dgp::{fe_dgp, fe_surface, three_hills, three_hills_mean, FeForm, Simulated};
use gkrls_simlab::fe::{run_fe_study, FeMethod, FeRecord, FeStudyConfig};
use gkrls_simlab::output::{csv_string, read_csv};
use gkrls_simlab::sketch::{relative_impact, run_sketch_stability, SketchRun, SketchStabilityConfig};
use gkrls_simlab::stats::{bootstrap, mean};
use gkrls_simlab::three_hills::{run_three_hills, ThreeHillsConfig, ThreeHillsRecord};

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn check_truth(sim: &Simulated, surface: impl Fn(f64, f64) -> f64) {
    let x1 = sim.data.column("x1").unwrap();
    let x2 = sim.data.column("x2").unwrap();
    for i in 0..sim.data.n() {
        let d1 = central(|v| surface(v, x2[i]), x1[i]);
        let d2 = central(|v| surface(x1[i], v), x2[i]);
        assert!((d1 - sim.d_x1[i]).abs() < 1e-6, "row {i}: {d1} vs {}", sim.d_x1[i]);
        assert!((d2 - sim.d_x2[i]).abs() < 1e-6, "row {i}: {d2} vs {}", sim.d_x2[i]);
    }
    let (a1, a2) = sim.true_ame();
    assert!((a1 - mean(&sim.d_x1)).abs() == 0.0 && (a2 - mean(&sim.d_x2)).abs() == 0.0);
}

#[test]
fn analytic_truths_match_finite_differences() {
    check_truth(&three_hills(400, 3).unwrap(), three_hills_mean);
    for form in [FeForm::Linear, FeForm::Nonlinear] {
        let (train, test) = fe_dgp(12, 5, 0.6, form, 8).unwrap();
        check_truth(&train, |a, b| fe_surface(form, a, b).0);
        check_truth(&test, |a, b| fe_surface(form, a, b).0);
    }
    let (train, _) = fe_dgp(10, 4, 0.3, FeForm::Linear, 1).unwrap();
    assert_eq!(train.true_ame().0, 0.5);
}

fn small_sketch_config() -> SketchStabilityConfig {
    SketchStabilityConfig {
        deltas: vec![1.0, 5.0],
        inner: 3,
        outer: 4,
        groups: 10,
        per_group: 6,
        seed: 21,
        ..SketchStabilityConfig::default()
    }
}

#[test]
fn relative_impact_is_reproduced_from_the_run_log() {
    let runs = run_sketch_stability(&small_sketch_config()).unwrap();
    assert_eq!(runs.len(), 4 * (1 + 2 * 3));
    let direct = relative_impact(&runs, 500, 4).unwrap();

    let text = csv_string(&runs).unwrap();
    let logged: Vec<SketchRun> = read_csv(text.as_bytes()).unwrap();
    assert_eq!(logged, runs);
    assert_eq!(relative_impact(&logged, 500, 4).unwrap(), direct);

    // independent recomputation of the point estimate
    for ri in &direct {
        let mut sketched = 0.0;
        let mut unsketched = 0.0;
        for s in 0..4 {
            let errs: Vec<f64> = logged
                .iter()
                .filter(|r| r.dataset == s && r.delta == Some(ri.delta))
                .map(|r| (r.ame_x1 - r.truth_x1).powi(2))
                .collect();
            sketched += (errs.iter().sum::<f64>() / errs.len() as f64).sqrt() / 4.0;
            let u = logged.iter().find(|r| r.dataset == s && r.delta.is_none()).unwrap();
            unsketched += (u.ame_x1 - u.truth_x1).abs() / 4.0;
        }
        let expect = (sketched - unsketched) / unsketched;
        assert!((ri.relative_impact.estimate - expect).abs() < 1e-12);
        assert!(ri.relative_impact.lo <= ri.relative_impact.estimate && ri.relative_impact.estimate <= ri.relative_impact.hi);
    }
}

fn without_timing(mut r: Vec<ThreeHillsRecord>) -> Vec<ThreeHillsRecord> {
    for x in &mut r {
        x.fit_seconds = 0.0;
    }
    r
}

fn fe_without_timing(mut r: Vec<FeRecord>) -> Vec<FeRecord> {
    for x in &mut r {
        x.fit_seconds = 0.0;
    }
    r
}

#[test]
fn studies_are_seed_deterministic() {
    let th = ThreeHillsConfig {
        n: 300,
        reps: 3,
        method: SketchMethod::Subsample,
        seed: 5,
        ..ThreeHillsConfig::default()
    };
    let a = without_timing(run_three_hills(&th).unwrap());
    assert_eq!(a, without_timing(run_three_hills(&th).unwrap()));
    assert_eq!(a.len(), 3);
    let other = without_timing(run_three_hills(&ThreeHillsConfig { seed: 6, ..th }).unwrap());
    assert_ne!(a, other);

    let sk = small_sketch_config();
    assert_eq!(run_sketch_stability(&sk).unwrap(), run_sketch_stability(&sk).unwrap());

    let fe = FeStudyConfig {
        rhos: vec![0.3],
        forms: vec![FeForm::Nonlinear],
        methods: vec![FeMethod::Ols, FeMethod::FixedEffects, FeMethod::GkrlsFeOutside],
        reps: 2,
        groups: 10,
        per_group: 5,
        seed: 3,
    };
    let f = fe_without_timing(run_fe_study(&fe).unwrap());
    assert_eq!(f.len(), 6);
    assert_eq!(f, fe_without_timing(run_fe_study(&fe).unwrap()));

    let cov = CoverageConfig {
        n: 120,
        sims: 2,
        grid: 8,
        methods: vec![CoverageMethod::GkrlsBayes],
        seed: 4,
    };
    assert_eq!(run_coverage(&cov).unwrap(), run_coverage(&cov).unwrap());

    let causal = CausalStudyConfig {
        method: CausalMethod::DmlPlr,
        n: 200,
        reps: 2,
        folds: 2,
        seed: 9,
        ..CausalStudyConfig::default()
    };
    assert_eq!(run_causal_study(&causal).unwrap(), run_causal_study(&causal).unwrap());
}

#[test]
fn bootstrap_interval_contains_estimate_and_narrows() {
    let values: Vec<f64> = (0..800).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * 2.0).collect();
    let width = |n: usize| {
        let ci = bootstrap(&values[..n], mean, 1000, 0.95, 7);
        assert!(ci.lo <= ci.estimate && ci.estimate <= ci.hi);
        ci.hi - ci.lo
    };
    let (small, large) = (width(50), width(800));
    assert!(large < small, "{large} vs {small}");
}
