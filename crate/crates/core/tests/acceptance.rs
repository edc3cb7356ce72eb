//! Acceptance suite: one line per criterion with its pinned tolerance and
//! runtime budget. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use bffg::agent::{poibin_pmf, CountPotential, SisKernel};
use bffg::chebyshev::{generator_matrix_exact, ChebPotential, WrightFisherEdge};
use bffg::ctmc::{AuxRates, CtmcEdge};
use bffg::dag::MultiFiniteKernel;
use bffg::engine::{
    draw_innovations, estimate_likelihood, run_backward, run_forward_seeded, sample_seed, EdgeKernel, Message, Model,
    State,
};
use bffg::finite::{FiniteKernel, VecPotential};
use bffg::gamma::{GammaKernel, RateMap};
use bffg::gaussian::{GaussKernel, GaussPotential, LinearGauss};
use bffg::graph::Graph;
use bffg::mcmc::{obs_variance_posterior, pcn_propose, run_chain, sample_inverse_gamma, McmcConfig, Prior};
use bffg::model::{tanh_tree, TANH_TRUE_THETA};
use bffg::oracle::{enumerate_conditional, enumerate_likelihood, ou_bridge_oracle, LinearSde};
use bffg::potential::{GuidedKernel, Potential};
use bffg::sde::{Dispersion, Drift, LinearAux, SdeEdge, SdeSpec};
use bffg::stats::{integrate, ks_one_sample, mean_and_se, total_variation};
use bffg::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// ---------------------------------------------------------------- helpers

fn stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| 0.05 + rng.random::<f64>());
    for mut r in m.row_iter_mut() {
        let s: f64 = r.iter().sum();
        r /= s;
    }
    m
}

fn one(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Random recursive tree on `n` vertices rooted at 0 (parent of `i` uniform on `0..i`).
fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Graph {
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    Graph::tree(0, n, &edges).expect("recursive trees are valid")
}

/// Finite-state tree with `R` hidden states and 3 observation symbols.
fn random_finite_model(seed: u64, perturbed: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let r = rng.random_range(1..=4);
    let graph = random_tree(n, &mut rng);
    let mut kernels = vec![None; n];
    let mut obs = vec![None; n];
    for v in 1..n {
        let leaf = graph.is_leaf(v);
        let cols = if leaf { 3 } else { r };
        let k = stochastic(r, cols, &mut rng);
        let kernel = if perturbed {
            FiniteKernel::with_aux(k, stochastic(r, cols, &mut rng)).unwrap()
        } else {
            FiniteKernel::exact(k).unwrap()
        };
        kernels[v] = Some(EdgeKernel::Finite(kernel));
        if leaf {
            obs[v] = Some(State::Discrete(rng.random_range(0..3)));
        }
    }
    let root = State::Discrete(rng.random_range(0..r));
    Model::new(graph, kernels, root, obs).unwrap()
}

fn log_normal_1d(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((x - m) * (x - m) / v + (2.0 * std::f64::consts::PI * v).ln())
}

// ---------------------------------------------------------------- criteria

fn c1_exact_tree() -> Result<Outcome> {
    let (mut worst_g, mut worst_w) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let m = random_finite_model(seed, false);
        let exact = enumerate_likelihood(&m)?;
        let bp = run_backward(&m)?;
        worst_g = worst_g.max((bp.log_root.exp() - exact).abs());
        for s in 0..5 {
            let (_, ledger) = run_forward_seeded(&m, &bp, s)?;
            for w in ledger.entries.iter().flatten() {
                worst_w = worst_w.max(w.abs());
            }
        }
    }
    outcome(
        worst_g <= 1e-12 && worst_w < 1e-10,
        format!("max |g_r - enum| = {worst_g:.2e} (tol 1e-12), max |log w| = {worst_w:.2e} (tol 1e-10)"),
    )
}

fn c2_unbiased() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let m = random_finite_model(seed, true);
        let exact = enumerate_likelihood(&m)?;
        let est = estimate_likelihood(&m, 100_000, 1000 + seed)?;
        let mean = est.log_mean.exp();
        let se = mean * est.relative_se;
        let z = if se > 0.0 { (mean - exact).abs() / se } else if (mean - exact).abs() < 1e-12 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    outcome(worst <= 3.0, format!("20 trees, 1e5 samples each: max |mean - enum| / SE = {worst:.2} (tol 3)"))
}

fn c3_linear_gaussian() -> Result<Outcome> {
    // line r -> 1 -> 2 -> 3 -> 4 -> 5 (leaf), bivariate
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 2;
    let mut kernels = vec![None];
    let mut lins = Vec::new();
    for _ in 0..5 {
        let phi = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.8..0.8));
        let beta = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        let q = &a * a.transpose() + DMatrix::identity(d, d) * 0.2;
        let lin = LinearGauss::new(phi, beta, q)?;
        lins.push(lin.clone());
        kernels.push(Some(EdgeKernel::Gaussian(GaussKernel::linear(lin))));
    }
    let x0 = DVector::from_vec(vec![0.3, -0.7]);
    let y = DVector::from_vec(vec![0.5, 0.1]);
    let graph = Graph::tree(0, 6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)])?;
    let mut obs = vec![None; 6];
    obs[5] = Some(State::Vector(y.clone()));
    let m = Model::new(graph, kernels, State::Vector(x0.clone()), obs)?;
    let bp = run_backward(&m)?;
    // Chapman–Kolmogorov composition of the five linear-Gaussian steps
    let (mut mean, mut cov) = (x0, DMatrix::zeros(d, d));
    for l in &lins {
        mean = &l.phi * mean + &l.beta;
        cov = &l.phi * cov * l.phi.transpose() + &l.q;
    }
    let ck = bffg::oracle::Normal { mean, cov }.log_density(&y)?;
    let lin_err = (bp.log_root.exp() - ck.exp()).abs() / ck.exp();

    // y | x ~ N(tanh x, q) guided by N(0.8 x + 0.1, q̃) against a Gaussian potential
    let (q, qt) = (0.3, 0.4);
    let aux = LinearGauss::new(one(0.8), DVector::from_element(1, 0.1), one(qt))?;
    let kernel = GaussKernel::nonlinear(
        Arc::new(|x: &DVector<f64>| x.map(f64::tanh)),
        Arc::new(move |_: &DVector<f64>| one(q)),
        aux,
    );
    let g = GaussPotential::new(-0.4, DVector::from_element(1, 1.3), one(2.5))?;
    let pulled = kernel.pullback(&g)?;
    let eval_g = |yy: f64| g.log_value(&DVector::from_element(1, yy)).unwrap();
    let mut worst: f64 = 0.0;
    for &x in &[-1.5, -0.4, 0.0, 0.7, 2.0] {
        let xv = DVector::from_element(1, x);
        let aux_q = integrate(|yy| (eval_g(yy) + log_normal_1d(yy, 0.8 * x + 0.1, qt)).exp(), -30.0, 30.0, 1e-14, 1e-12)?;
        let fwd_q = integrate(|yy| (eval_g(yy) + log_normal_1d(yy, x.tanh(), q)).exp(), -30.0, 30.0, 1e-14, 1e-12)?;
        let p = pulled.log_value(&xv)?.exp();
        let w = kernel.log_weight(&g, &pulled, &xv)?.exp();
        worst = worst.max((p - aux_q).abs() / aux_q).max((w - fwd_q / aux_q).abs() / (fwd_q / aux_q));
    }
    outcome(
        lin_err <= 1e-8 && worst <= 1e-6,
        format!("line graph rel err {lin_err:.2e} (tol 1e-8); tanh pullback/weight vs quadrature rel err {worst:.2e} (tol 1e-6)"),
    )
}

fn c4_riccati() -> Result<Outcome> {
    let d = 2;
    let tau = 1.0;
    let sde = SdeSpec {
        drift: Drift::Linear { b: DMatrix::zeros(d, d), beta: DVector::zeros(d) },
        dispersion: Dispersion::Constant(DMatrix::identity(d, d)),
    };
    let aux = LinearAux::constant(DMatrix::zeros(d, d), DVector::zeros(d), DMatrix::identity(d, d));
    let edge = SdeEdge::with_steps(sde, aux, tau, 1000)?;
    let h_tau = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let terminal = GaussPotential::new(0.0, DVector::from_vec(vec![0.4, -0.2]), h_tau.clone())?;
    let ode = edge.solve_backward(&terminal)?;
    let h_inv = h_tau.try_inverse().unwrap();
    let mut worst: f64 = 0.0;
    for (k, u) in ode.grid.iter().enumerate() {
        let exact = (&h_inv + DMatrix::identity(d, d) * (tau - u)).try_inverse().unwrap();
        worst = worst.max((&ode.h[k] - exact).abs().max());
    }
    outcome(worst <= 1e-6, format!("max |H(u) - (H(τ)^-1 + (τ-u)I)^-1| = {worst:.2e} over 1e3 RK4 steps (tol 1e-6)"))
}

fn ou_model(theta: f64, sigma: f64, aux_b: f64, x0: f64, y: f64, s2: f64, tau: f64) -> Result<Model> {
    let sde = SdeSpec {
        drift: Drift::Linear { b: one(-theta), beta: DVector::zeros(1) },
        dispersion: Dispersion::Constant(one(sigma)),
    };
    let aux = LinearAux::constant(one(aux_b), DVector::zeros(1), one(sigma));
    let edge = SdeEdge::with_steps(sde, aux, tau, (tau / 1e-3).round() as usize)?;
    let leaf = LinearGauss::new(one(1.0), DVector::zeros(1), one(s2))?;
    let graph = Graph::tree(0, 3, &[(0, 1), (1, 2)])?;
    Model::new(
        graph,
        vec![None, Some(EdgeKernel::Sde(edge)), Some(EdgeKernel::Gaussian(GaussKernel::linear(leaf)))],
        State::Vector(DVector::from_element(1, x0)),
        vec![None, None, Some(State::Vector(DVector::from_element(1, y)))],
    )
}

fn c5_ou_bridges() -> Result<Outcome> {
    let (theta, sigma, x0, y, s2, tau) = (1.0, 0.6, 0.5, -0.4, 1e-4, 1.0);
    let mismatched = ou_model(theta, sigma, -0.2, x0, y, s2, tau)?;
    let est = estimate_likelihood(&mismatched, 10_000, 55)?;
    let oracle: LinearSde = ou_bridge_oracle(-theta, 0.0, sigma);
    let tr = oracle.transition(tau, &DVector::from_element(1, x0));
    let exact = log_normal_1d(y, tr.mean[0], tr.cov[(0, 0)] + s2).exp();
    let mean = est.log_mean.exp();
    let z = (mean - exact).abs() / (mean * est.relative_se);

    let matched = ou_model(theta, sigma, -theta, x0, y, s2, tau)?;
    let bp = run_backward(&matched)?;
    let worst = (0..10_000u64)
        .into_par_iter()
        .map(|i| run_forward_seeded(&matched, &bp, sample_seed(56, i as usize)).map(|(_, l)| l.edge_total().abs()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    outcome(
        z <= 3.0 && worst <= 0.05,
        format!(
            "mismatched: estimate {mean:.5} vs OU density {exact:.5}, {z:.2} SE (tol 3); matched: max |log w| = {worst:.2e} (tol 0.05)"
        ),
    )
}

fn c6_poibin() -> Result<Outcome> {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.9)).collect();
    let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.6)).collect();
    // ring contact graph
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + n - 1) % n, (i + 1) % n]).collect();
    let kernel = SisKernel::new(lambda.clone(), gamma.clone(), neighbors.clone())?;
    let x: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let alpha = |x: &[bool], i: usize| -> f64 {
        if x[i] {
            1.0 - gamma[i]
        } else {
            lambda[i] * neighbors[i].iter().filter(|&&j| x[j]).count() as f64 / neighbors[i].len() as f64
        }
    };
    let probs: Vec<f64> = (0..n).map(|i| alpha(&x, i)).collect();
    let configs: Vec<Vec<bool>> = (0..1u32 << n).map(|m| (0..n).map(|i| m >> i & 1 == 1).collect()).collect();
    let prob_of = |y: &[bool], p: &dyn Fn(usize) -> f64| -> f64 {
        y.iter().enumerate().map(|(i, &b)| if b { p(i) } else { 1.0 - p(i) }).product()
    };
    // Poisson-binomial pmf
    let mut brute = vec![0.0; n + 1];
    for y in &configs {
        brute[y.iter().filter(|&&b| b).count()] += prob_of(y, &|i| probs[i]);
    }
    let pmf = poibin_pmf(&probs)?;
    let mut err: f64 = brute.iter().zip(&pmf).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // pullback under the mean-field auxiliary
    let psi: Vec<f64> = (0..=n).map(|s| 0.1 + (s as f64 * 0.7).sin().abs()).collect();
    let g = CountPotential { psi: VecPotential::from_values(&psi)? };
    let pulled = kernel.pullback(&g)?;
    let (al, ag) = (kernel.aux_lambda, kernel.aux_gamma);
    for s in 0..=n {
        let xs: Vec<bool> = (0..n).map(|i| i < s).collect();
        let p_aux = |i: usize| if xs[i] { 1.0 - ag } else { al * s as f64 / n as f64 };
        let v: f64 = configs.iter().map(|y| psi[y.iter().filter(|&&b| b).count()] * prob_of(y, &p_aux)).sum();
        err = err.max((pulled.log_at_count(s)?.exp() - v).abs());
    }
    // weight under the true network dynamics
    let fwd: f64 = configs.iter().map(|y| psi[y.iter().filter(|&&b| b).count()] * prob_of(y, &|i| probs[i])).sum();
    let w_brute = fwd / pulled.log_eval(&x)?.exp();
    let w = kernel.log_weight(&g, &pulled, &x)?.exp();
    err = err.max((w - w_brute).abs());

    // guided sampling, N = 5
    let n5 = 5;
    let k5 = SisKernel::new(lambda[..n5].to_vec(), gamma[..n5].to_vec(), (0..n5).map(|i| vec![(i + n5 - 1) % n5, (i + 1) % n5]).collect())?;
    let x5: Vec<bool> = vec![true, false, false, true, false];
    let psi5: Vec<f64> = vec![0.2, 1.0, 0.5, 2.0, 0.1, 0.7];
    let g5 = CountPotential { psi: VecPotential::from_values(&psi5)? };
    let p5 = k5.infection_probabilities(&x5)?;
    let mut exact = vec![0.0; 1 << n5];
    for (m, e) in exact.iter_mut().enumerate() {
        let y: Vec<bool> = (0..n5).map(|i| m >> i & 1 == 1).collect();
        *e = psi5[y.iter().filter(|&&b| b).count()] * prob_of(&y, &|i| p5[i]);
    }
    let z: f64 = exact.iter().sum();
    exact.iter_mut().for_each(|e| *e /= z);
    let draws = 1_000_000;
    let counts = (0..16u64)
        .into_par_iter()
        .map(|chunk| -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + chunk);
            let mut c = vec![0.0; 1 << n5];
            for _ in 0..draws / 16 {
                let y = k5.guided_sample(&g5, &x5, &mut rng)?;
                c[y.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>()] += 1.0;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let emp: Vec<f64> = (0..1 << n5).map(|k| counts.iter().map(|c| c[k]).sum::<f64>() / draws as f64).collect();
    let tv = total_variation(&emp, &exact);
    outcome(
        err <= 1e-12 && tv < 0.01,
        format!("N=8 brute force max err {err:.2e} (tol 1e-12); guided joint pmf TV {tv:.4} at 1e6 draws (tol 0.01)"),
    )
}

fn c7_gamma() -> Result<Outcome> {
    let kernel = GammaKernel::new(1.5, RateMap::Sinusoidal { base: 2.0, amplitude: 0.5 }, 2.0)?;
    let anchor = 4.0;
    let g = kernel.pullback(&kernel.leaf_potential(anchor)?)?; // shape 3, one step above the leaf
    let pulled = kernel.pullback(&g)?;
    let law = pulled.shape == g.shape + kernel.shape && pulled.rate == g.rate && pulled.anchor == anchor;
    let mut quad_err: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut confined = true;
    for &x in &[0.5, 1.5, 3.0] {
        // exact pullback under the auxiliary Gamma(α, β̃) increment
        let aux = integrate(
            |d| (g.log_value(x + d) + bffg::gamma::log_gamma_density(d, kernel.shape, kernel.aux_rate)).exp(),
            0.0,
            anchor - x,
            1e-15,
            1e-12,
        )?;
        quad_err = quad_err.max((pulled.log_value(x).exp() - aux).abs() / aux);
        // weight by quadrature vs direct Monte Carlo under the true increment law
        let w = kernel.log_weight_quadrature(&g, x)?.exp();
        let b = kernel.rate.eval(x)?;
        let inc = GammaDist::new(kernel.shape, 1.0 / b).unwrap();
        let vals: Vec<f64> = (0..1_000_000).map(|_| (g.log_value(x + inc.sample(&mut rng)) - pulled.log_value(x)).exp()).collect();
        let (m, se) = mean_and_se(&vals);
        worst_z = worst_z.max((m - w).abs() / se);
        for _ in 0..10_000 {
            let y = kernel.guided_sample(&g, &x, &mut rng)?;
            confined &= y > x && y < anchor;
        }
    }
    outcome(
        law && quad_err < 1e-9 && worst_z <= 3.0 && confined,
        format!(
            "pullback law (A+α, β̃) exact: {law}, vs quadrature rel err {quad_err:.2e}; weight vs 1e6-draw MC max {worst_z:.2} SE (tol 3); samples in (x, x_v): {confined}"
        ),
    )
}

fn ctmc_model(aux: Option<DMatrix<f64>>) -> Result<Model> {
    let q = DMatrix::from_row_slice(3, 3, &[-1.0, 0.7, 0.3, 0.4, -0.9, 0.5, 0.2, 0.8, -1.0]);
    let edge = match aux {
        Some(a) => CtmcEdge::new(q, AuxRates::Dense(a), 1.0)?,
        None => CtmcEdge::exact(q, 1.0)?,
    };
    let emit = DMatrix::from_row_slice(3, 3, &[0.7, 0.2, 0.1, 0.2, 0.6, 0.2, 0.1, 0.1, 0.8]);
    let graph = Graph::tree(0, 3, &[(0, 1), (1, 2)])?;
    Model::new(
        graph,
        vec![None, Some(EdgeKernel::Ctmc(edge)), Some(EdgeKernel::Finite(FiniteKernel::exact(emit)?))],
        State::Discrete(0),
        vec![None, None, Some(State::Discrete(2))],
    )
}

fn c8_ctmc() -> Result<Outcome> {
    let aux = DMatrix::from_row_slice(3, 3, &[-0.6, 0.3, 0.3, 0.3, -0.6, 0.3, 0.3, 0.3, -0.6]);
    let m = ctmc_model(Some(aux))?;
    let exact = enumerate_conditional(&m)?.marginal(1)?;
    let bp = run_backward(&m)?;
    let samples = (0..100_000usize)
        .into_par_iter()
        .map(|i| {
            run_forward_seeded(&m, &bp, sample_seed(8, i)).map(|(t, l)| match t.states[1] {
                Some(State::Discrete(k)) => (k, l.total()),
                _ => unreachable!(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut hist = vec![0.0; 3];
    for (k, lw) in &samples {
        hist[*k] += (lw - max).exp();
    }
    let z: f64 = hist.iter().sum();
    hist.iter_mut().for_each(|h| *h /= z);
    let tv = total_variation(&hist, &exact);

    let exact_model = ctmc_model(None)?;
    let bp0 = run_backward(&exact_model)?;
    let mut worst: f64 = 0.0;
    for s in 0..200 {
        let (_, l) = run_forward_seeded(&exact_model, &bp0, s)?;
        worst = worst.max(l.edge_total().abs());
    }
    outcome(
        tv < 0.02 && worst < 1e-12,
        format!("weighted endpoint TV {tv:.4} vs expm conditioning at 1e5 paths (tol 0.02); Q̃=Q max |log w| = {worst:.1e}"),
    )
}

fn c9_chebyshev() -> Result<Outcome> {
    let mut triangular = true;
    for k in 1..=16 {
        for &(b1, b2) in &[(1.0, 2.0), (0.5, 0.1), (0.0, 0.7)] {
            let q = generator_matrix_exact(b1, b2, k)?;
            for (i, row) in q.iter().enumerate() {
                triangular &= row[..i].iter().all(|v| *v == num_rational::BigRational::from_integer(0.into()));
            }
        }
    }
    let q1 = generator_matrix_exact(1.0, 2.0, 1)?;
    let r = |v: i64| num_rational::BigRational::from_integer(v.into());
    let k1 = q1 == vec![vec![r(0), r(3)], vec![r(0), r(1)]];

    let edge = WrightFisherEdge::<f64>::with_steps(0.5, 0.0, 8, 0.3, 1000)?;
    let leaf = ChebPotential::<f64>::init_leaf(3, 2, 8)?;
    let pulled = edge.pullback(&leaf)?.edge_potential()?;
    let mut worst: f64 = 0.0;
    for (i, &x) in [0.2, 0.35, 0.5, 0.65, 0.8].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + i as u64);
        let vals: Vec<f64> = (0..10_000).map(|_| leaf.eval(edge.forward_simulate(x, &mut rng))).collect();
        let (m, se) = mean_and_se(&vals);
        worst = worst.max((pulled.eval(x) - m).abs() / se);
    }
    outcome(
        triangular && k1 && worst <= 3.0,
        format!("upper triangular K<=16: {triangular}; K=1 matrix [[0,3],[0,1]]: {k1}; pullback vs 1e4 Euler paths max {worst:.2} SE (tol 3)"),
    )
}

fn c10_dag() -> Result<Outcome> {
    // r → 1a, 1b; {1a, 1b} → 2; 2 → 4a, 4b; 4a → 5a, 4b → 5b
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let graph = Graph::new(0, vec![vec![], vec![0], vec![0], vec![1, 2], vec![3], vec![3], vec![4], vec![5]])?;
    let fk = |rng: &mut ChaCha8Rng, rows| {
        let k = stochastic(rows, 2, rng);
        FiniteKernel::with_aux(k, stochastic(rows, 2, rng)).unwrap()
    };
    let mut kernels: Vec<Option<EdgeKernel>> = vec![None];
    kernels.push(Some(EdgeKernel::Finite(fk(&mut rng, 2))));
    kernels.push(Some(EdgeKernel::Finite(fk(&mut rng, 2))));
    kernels.push(Some(EdgeKernel::MultiFinite(MultiFiniteKernel::new(vec![2, 2], fk(&mut rng, 4), None)?)));
    for _ in 0..4 {
        kernels.push(Some(EdgeKernel::Finite(fk(&mut rng, 2))));
    }
    let mut obs = vec![None; 8];
    obs[6] = Some(State::Discrete(1));
    obs[7] = Some(State::Discrete(0));
    let m = Model::new(graph, kernels, State::Discrete(0), obs)?;
    let exact = enumerate_likelihood(&m)?;
    let est = estimate_likelihood(&m, 100_000, 10)?;
    let mean = est.log_mean.exp();
    let z = (mean - exact).abs() / (mean * est.relative_se);

    // single-parent reduction
    let mut identical = true;
    for seed in 0..10 {
        let tree = random_finite_model(500 + seed, true);
        let g = tree.graph.clone();
        let kernels: Vec<Option<EdgeKernel>> = tree
            .kernels()
            .iter()
            .enumerate()
            .map(|(v, k)| match k {
                Some(EdgeKernel::Finite(f)) if !g.is_leaf(v) => {
                    Some(EdgeKernel::MultiFinite(MultiFiniteKernel::new(vec![f.source_states()], f.clone(), None).unwrap()))
                }
                other => other.clone(),
            })
            .collect();
        let dag = Model::new(g, kernels, tree.root_value.clone(), tree.observations().to_vec())?;
        let (bt, bd) = (run_backward(&tree)?, run_backward(&dag)?);
        identical &= bt.log_root.to_bits() == bd.log_root.to_bits();
        for s in 0..5 {
            identical &= run_forward_seeded(&tree, &bt, s)?.1 == run_forward_seeded(&dag, &bd, s)?.1;
        }
    }
    outcome(
        z <= 3.0 && identical,
        format!("collider estimate {mean:.6} vs enumeration {exact:.6}: {z:.2} SE (tol 3); |pa|=1 ledgers bit-identical: {identical}"),
    )
}

fn c11_mcmc() -> Result<Outcome> {
    let spec = tanh_tree(&[4, 4, 5], &TANH_TRUE_THETA, 11)?;
    let builder = spec.builder();
    let mut params = spec.mcmc_parameters();
    for (p, start) in params.iter_mut().zip([0.3, 0.3, 0.2, 0.25]) {
        p.initial = start;
    }
    // the flat-prior posterior of θ1 has a non-integrable tail at this tree size
    params[1].prior = Prior::Gamma { shape: 1.0, rate: 1.0 };
    let cfg = McmcConfig { iterations: 5000, burnin: 1000, lambda: 0.9, seed: 11, obs_variance: None, check_cache: true };
    let trace = run_chain(&builder, &params, &cfg)?;
    let acc = trace.path_acceptance;
    let theta1 = trace.posterior_mean("theta1").unwrap();

    let model = builder(&TANH_TRUE_THETA)?;
    let bp = run_backward(&model)?;
    let mut z = draw_innovations(&model, &bp, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        z = pcn_propose(&z, 0.9, &mut rng)?;
    }
    let n = StdNormal::new(0.0, 1.0).unwrap();
    let p = ks_one_sample(&z.flatten(), |x| n.cdf(x))?.p_value;
    let cache = trace.max_cache_error;
    outcome(
        acc > 0.1 && acc < 0.9 && (theta1 - 0.65).abs() <= 0.3 && p > 0.01 && cache <= 1e-9,
        format!(
            "13 leaves, 5000 iterations, Exp(1) prior on θ1: pCN acceptance {acc:.3} (in (0.1, 0.9)); posterior mean θ1 {theta1:.3} (0.65 ± 0.3); pCN KS p {p:.3} (> 0.01); Ψ cache error {cache:.1e} (tol 1e-9)"
        ),
    )
}

fn c12_conjugate() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let eps: f64 = 0.01;
    let residuals: Vec<DVector<f64>> = (0..20)
        .map(|_| DVector::from_fn(2, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); eps.sqrt() * z }))
        .collect();
    let (a, b) = obs_variance_posterior(&residuals, 2.0, 0.005);
    let n: usize = residuals.iter().map(|r| r.len()).sum();
    let ss: f64 = residuals.iter().map(|r| r.norm_squared()).sum();
    let closed_ok = a == 2.0 + n as f64 / 2.0 && (b - (0.005 + 0.5 * ss)).abs() < 1e-15;
    let exact_mean = b / (a - 1.0);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_inverse_gamma(a, b, &mut rng).unwrap()).collect();
    let (m, se) = mean_and_se(&draws);
    let z = (m - exact_mean).abs() / se;
    outcome(
        closed_ok && z <= 3.0,
        format!("IG({a}, {b:.5}) posterior mean {exact_mean:.6} vs MC {m:.6}: {z:.2} SE (tol 3)"),
    )
}

fn c13_telescoping() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1300 + seed);
        let n = rng.random_range(2..=9);
        let g = random_tree(n, &mut rng);
        let gaussian = seed % 2 == 1;
        let d = 2;
        let r = 3;
        // random message on every edge, random state at every vertex
        let msgs: Vec<Option<Message>> = (0..n)
            .map(|v| {
                (v != 0).then(|| {
                    if gaussian {
                        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
                        let h = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
                        let f = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                        Message::Gaussian(GaussPotential::new(rng.random_range(-1.0..1.0), f, h).unwrap())
                    } else {
                        let v: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..3.0)).collect();
                        Message::Finite(VecPotential::from_values(&v).unwrap())
                    }
                })
            })
            .collect();
        let states: Vec<State> = (0..n)
            .map(|_| {
                if gaussian {
                    State::Vector(DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)))
                } else {
                    State::Discrete(rng.random_range(0..r))
                }
            })
            .collect();
        let edge = |t: usize| -> Result<f64> { msgs[t].as_ref().unwrap().log_eval(&states[g.parents(t)?[0]]) };
        let fused = |s: usize| -> Result<f64> {
            let ch: Vec<Message> = g.children(s)?.iter().map(|&t| msgs[t].clone().unwrap()).collect();
            Message::fuse(&ch)?.log_eval(&states[s])
        };
        let inner: Vec<usize> = (1..n).filter(|&v| !g.is_leaf(v)).collect();
        let mut lhs = 0.0;
        for &s in &inner {
            for &t in g.children(s)? {
                lhs += edge(t)?;
            }
            lhs -= edge(s)?;
        }
        let mut rhs = -fused(0)?;
        for v in g.leaves() {
            rhs += edge(v)?;
        }
        // all fused potentials evaluate consistently with their factors
        for &s in &inner {
            let direct: f64 = g.children(s)?.iter().map(|&t| edge(t)).sum::<Result<f64>>()?;
            worst = worst.max((fused(s)? - direct).abs());
        }
        worst = worst.max((lhs - rhs).abs());
    }
    outcome(worst <= 1e-10, format!("100 random trees (finite and Gaussian): max |log LHS - log RHS| = {worst:.2e} (tol 1e-10)"))
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion, u64); 13] = [
        ("exact-tree oracle equivalence", c1_exact_tree, 1),
        ("unbiased likelihood", c2_unbiased, 30),
        ("linear-Gaussian consistency", c3_linear_gaussian, 5),
        ("Riccati closed form", c4_riccati, 1),
        ("OU bridge weights", c5_ou_bridges, 60),
        ("Poisson-binomial exactness", c6_poibin, 60),
        ("Gamma family", c7_gamma, 30),
        ("CTMC bridge", c8_ctmc, 60),
        ("Chebyshev filter", c9_chebyshev, 60),
        ("DAG collider", c10_dag, 10),
        ("MCMC on the tanh tree", c11_mcmc, 600),
        ("conjugate noise-variance update", c12_conjugate, 5),
        ("telescoping identity", c13_telescoping, 1),
    ];
    let only: Option<usize> = std::env::var("BFFG_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failures = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let res = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*limit);
        let (pass, detail) = match res {
            Ok(o) => (o.pass && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "[{}] {id:>2}. {name}: {detail}; runtime {:.2} s (limit {limit} s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
