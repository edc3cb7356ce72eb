use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bffg::chebyshev::{coeffs_to_values, values_to_coeffs, ChebPotential};
use bffg::engine::{draw_innovations, run_backward, run_forward_seeded, EdgeKernel, Model, State};
use bffg::finite::{FiniteKernel, VecPotential};
use bffg::gaussian::GaussPotential;
use bffg::graph::Graph;
use bffg::mcmc::pcn_propose;
use bffg::model::{tanh_tree, ModelSpec, TANH_TRUE_THETA};
use bffg::oracle::enumerate_likelihood;
use bffg::potential::Potential;

fn stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() + 0.05);
    for mut r in m.row_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn finite_tree(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=7);
    let edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
    let graph = Graph::tree(0, n, &edges).unwrap();
    let states = rng.random_range(1..=3);
    let mut kernels = vec![None; n];
    let mut obs = vec![None; n];
    for v in 1..n {
        let cols = if graph.is_leaf(v) { 2 } else { states };
        kernels[v] = Some(EdgeKernel::Finite(FiniteKernel::exact(stochastic(states, cols, &mut rng)).unwrap()));
        if graph.is_leaf(v) {
            obs[v] = Some(State::Discrete(rng.random_range(0..2)));
        }
    }
    Model::new(graph, kernels, State::Discrete(0), obs).unwrap()
}

fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> GaussPotential<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    let h = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
    let f = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    GaussPotential::new(rng.random::<f64>(), f, h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// With exact guiding every sample's total log-weight is the log-likelihood.
    #[test]
    fn exact_guiding_has_zero_variance(seed in any::<u64>()) {
        let m = finite_tree(seed);
        let exact = enumerate_likelihood(&m).unwrap().ln();
        let bp = run_backward(&m).unwrap();
        prop_assert!((bp.log_root - exact).abs() < 1e-10);
        for s in 0..4 {
            let (_, ledger) = run_forward_seeded(&m, &bp, s).unwrap();
            prop_assert!((ledger.total() - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_fusion_is_symmetric_and_associative(seed in any::<u64>(), d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (gaussian(d, &mut rng), gaussian(d, &mut rng), gaussian(d, &mut rng));
        let abc = GaussPotential::fuse(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cba = GaussPotential::fuse(&[c.clone(), b.clone(), a.clone()]).unwrap();
        let nested = GaussPotential::fuse(&[GaussPotential::fuse(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
        let x = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
        let direct = a.log_eval(&x).unwrap() + b.log_eval(&x).unwrap() + c.log_eval(&x).unwrap();
        for g in [&abc, &cba, &nested] {
            prop_assert!((g.log_eval(&x).unwrap() - direct).abs() < 1e-10 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn finite_fusion_adds_log_values(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || VecPotential::from_log(DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0));
        let (a, b) = (draw(), draw());
        let ab = VecPotential::fuse(&[a.clone(), b.clone()]).unwrap();
        let ba = VecPotential::fuse(&[b.clone(), a.clone()]).unwrap();
        for i in 0..n {
            let want = a.log[i] + b.log[i];
            prop_assert!((ab.log_eval(&i).unwrap() - want).abs() < 1e-12);
            prop_assert!((ba.log_eval(&i).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_models_round_trip(seed in 0u64..1000, shape in proptest::collection::vec(1usize..4, 1..4)) {
        let spec = tanh_tree(&shape, &TANH_TRUE_THETA, seed).unwrap();
        let text = spec.to_toml().unwrap();
        let back = ModelSpec::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &spec);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }

    /// `Z° = λZ + √(1-λ²)W`: the same noise stream applied to zero innovations
    /// gives the `W` part.
    #[test]
    fn pcn_is_the_stated_linear_combination(seed in any::<u64>(), lambda in 0.0f64..0.999) {
        let spec = tanh_tree(&[1, 1], &TANH_TRUE_THETA, 3).unwrap();
        let m = spec.instantiate(&TANH_TRUE_THETA).unwrap();
        let bp = run_backward(&m).unwrap();
        let z = draw_innovations(&m, &bp, seed).unwrap();
        let mut zero = z.clone();
        for e in zero.edges.iter_mut().flatten() {
            for v in e.iter_mut() {
                v.fill(0.0);
            }
        }
        let p = pcn_propose(&z, lambda, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap().flatten();
        let w = pcn_propose(&zero, lambda, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap().flatten();
        for ((pi, wi), zi) in p.iter().zip(&w).zip(z.flatten()) {
            prop_assert!((pi - (lambda * zi + wi)).abs() < 1e-12);
        }
    }

    #[test]
    fn chebyshev_transforms_are_inverse(seed in any::<u64>(), k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DVector::from_fn(k + 1, |_, _| rng.random::<f64>() - 0.5);
        let back = values_to_coeffs(&coeffs_to_values(&c));
        prop_assert!((back - &c).amax() < 1e-12);
        let g = ChebPotential::from_coeffs(c.clone()).unwrap();
        let x: f64 = rng.random();
        let direct: f64 = (0..=k).map(|j| c[j] * ((j as f64) * (2.0 * x - 1.0).acos()).cos()).sum();
        prop_assert!((g.eval(x) - direct).abs() < 1e-12);
    }
}

#[test]
fn pcn_with_lambda_outside_unit_interval_is_refused() {
    let spec = tanh_tree(&[1], &TANH_TRUE_THETA, 1).unwrap();
    let m = spec.instantiate(&TANH_TRUE_THETA).unwrap();
    let z = draw_innovations(&m, &run_backward(&m).unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(pcn_propose(&z, 1.0, &mut rng).is_err() && pcn_propose(&z, -0.1, &mut rng).is_err());
}
