//! Properties of fitted rules on small random problems.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fair_itr::kernel::{gram_symmetric, KernelSpec};
use fair_itr::policy::{decision_values, fit_dpa_itr, fit_owl, FitOptions, FitProblem, PolicyModel};
use fair_itr::qp::primal_objective;
use fair_itr::{Dataset, ProxyKind};

fn random_data(seed: u64, n: usize, k: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let s = DMatrix::from_fn(n, k, |_, _| f64::from(u8::from(rng.random_bool(0.5))));
    let a: Vec<i8> = (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
    let r: Vec<f64> = (0..n).map(|i| x[(i, 0)] * f64::from(a[i]) + 2.0 * s[(i, 0)] + rng.random_range(0.0..1.0)).collect();
    Dataset::new(x, s, a, r).unwrap().with_propensity(vec![0.5; n]).unwrap().shift_rewards()
}

fn kernel(gaussian: bool) -> KernelSpec {
    if gaussian {
        KernelSpec::gaussian(1.5).unwrap()
    } else {
        KernelSpec::linear()
    }
}

fn primal(d: &Dataset, spec: &KernelSpec, m: &PolicyModel) -> f64 {
    let gram = gram_symmetric(spec, &d.features()).unwrap();
    primal_objective(d, &gram, &DVector::from_vec(m.u.clone()), m.b0, m.kappa).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn primal_objective_does_not_grow_with_budget(seed in any::<u64>(), n in 12usize..30, gaussian in any::<bool>(), intercept in any::<bool>()) {
        let d = random_data(seed, n, 1);
        let spec = kernel(gaussian);
        let opts = FitOptions { intercept, ..FitOptions::default() };
        let mut prev = f64::INFINITY;
        for c in [0.01, 0.05, 0.1, 1.0, 100.0] {
            let m = fit_dpa_itr(&d, spec, ProxyKind::Nonlinear, 0.5, &[c], &opts).unwrap();
            prop_assert!(m.diagnostics.converged);
            let obj = primal(&d, &spec, &m);
            prop_assert!(obj <= prev + 1e-6 * (1.0 + prev.abs()), "c = {c}: {obj} after {prev}");
            prev = obj;
        }
    }

    #[test]
    fn training_proxy_respects_budget(seed in any::<u64>(), n in 12usize..30, k in 1usize..3, c in 0.0f64..0.3, gaussian in any::<bool>()) {
        let d = random_data(seed, n, k);
        let m = fit_dpa_itr(&d, kernel(gaussian), ProxyKind::Linear, 0.5, &vec![c; k], &FitOptions::default()).unwrap();
        prop_assert!(m.diagnostics.converged);
        for p in &m.diagnostics.train_proxy {
            prop_assert!(p.abs() <= c + 1e-4 * (1.0 + c), "|{p}| > {c}");
        }
    }

    #[test]
    fn huge_budget_reproduces_the_unconstrained_rule(seed in any::<u64>(), n in 12usize..30, gaussian in any::<bool>()) {
        let d = random_data(seed, n, 1);
        let spec = kernel(gaussian);
        let opts = FitOptions { intercept: false, ..FitOptions::default() };
        let fair = fit_dpa_itr(&d, spec, ProxyKind::Nonlinear, 0.5, &[1e6], &opts).unwrap();
        let owl = fit_owl(&d, spec, 0.5, &opts).unwrap();
        let scale = 1.0 + owl.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in fair.u.iter().zip(&owl.u) {
            prop_assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn saved_model_predicts_identically(seed in any::<u64>(), n in 12usize..30, gaussian in any::<bool>()) {
        let d = random_data(seed, n, 2);
        let m = fit_dpa_itr(&d, kernel(gaussian), ProxyKind::Nonlinear, 0.5, &[0.05, 0.1], &FitOptions::default()).unwrap();
        let back = PolicyModel::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &m);
        let fresh = random_data(seed ^ 1, 15, 2);
        prop_assert_eq!(decision_values(&m, fresh.x(), fresh.s()).unwrap(), decision_values(&back, fresh.x(), fresh.s()).unwrap());
    }

    #[test]
    fn warm_started_path_matches_cold_fits(seed in any::<u64>(), n in 12usize..30) {
        let d = random_data(seed, n, 1);
        let opts = FitOptions::default();
        let mut path = FitProblem::new(&d, KernelSpec::linear(), Some(ProxyKind::Nonlinear), 0.5, &opts).unwrap();
        for c in [0.02, 0.08, 0.3] {
            let warm = path.fit(&[c]).unwrap();
            let cold = fit_dpa_itr(&d, KernelSpec::linear(), ProxyKind::Nonlinear, 0.5, &[c], &opts).unwrap();
            let gap = (warm.diagnostics.objective - cold.diagnostics.objective).abs();
            prop_assert!(gap <= 1e-6 * (1.0 + cold.diagnostics.objective.abs()), "c = {c}: gap {gap}");
        }
    }
}

#[test]
fn linear_rule_is_affine_in_features() {
    let d = random_data(3, 25, 1);
    let m = fit_dpa_itr(&d, KernelSpec::linear(), ProxyKind::Nonlinear, 0.5, &[0.05], &FitOptions::default()).unwrap();
    let probe = random_data(4, 10, 1);
    let f = decision_values(&m, probe.x(), probe.s()).unwrap();
    let z = probe.features();
    let train = d.features();
    let beta = train.transpose() * DVector::from_vec(m.u.clone());
    for (row, fi) in z.row_iter().zip(&f) {
        let direct = row.dot(&beta.transpose()) + m.b0;
        assert!((direct - fi).abs() <= 1e-9 * (1.0 + direct.abs()));
    }
}
