//! Metropolis-within-Gibbs over parameters and guided-path innovations.
//!
//! The chain state is `(θ, Z)`: innovations move by preconditioned
//! Crank–Nicolson proposals, parameters by scalar random-walk steps that
//! re-run the backward filter and push the same innovations through the new
//! guided dynamics.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::engine::{
    innovations_from_trajectory, run_backward, run_forward_with, BackwardPass, EdgeKernel, Innovations, Model, State,
    Trajectory, WeightLedger, draw_innovations, stream_seed,
};
use crate::error::{Error, Result};

/// Builds the model for a parameter vector.
pub type ModelBuilder = Arc<dyn Fn(&[f64]) -> Result<Model> + Send + Sync>;

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// Improper uniform density on the whole line.
    #[default]
    Flat,
    /// Improper uniform density on `(0, ∞)`.
    FlatPositive,
    Normal { mean: f64, sd: f64 },
    Uniform { lower: f64, upper: f64 },
    Gamma { shape: f64, rate: f64 },
    InverseGamma { shape: f64, scale: f64 },
}

impl Prior {
    pub fn log_density(&self, x: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        match *self {
            Prior::Flat => 0.0,
            Prior::FlatPositive => {
                if x > 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            Prior::Uniform { lower, upper } => {
                if x > lower && x < upper {
                    -(upper - lower).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Gamma { shape, rate } => {
                if x > 0.0 {
                    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::InverseGamma { shape, scale } => {
                if x > 0.0 {
                    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// A scalar parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub initial: f64,
    /// Random-walk standard deviation; zero keeps the parameter fixed.
    pub step: f64,
    pub prior: Prior,
}

/// Gibbs update of a shared isotropic leaf-noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsVarianceUpdate {
    /// Index of the variance in the parameter vector.
    pub parameter: usize,
    pub shape: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burnin: usize,
    /// pCN memory `λ ∈ [0, 1)`.
    pub lambda: f64,
    pub seed: u64,
    pub obs_variance: Option<ObsVarianceUpdate>,
    /// Verify the cached `log Ψ` against a fresh evaluation after every
    /// accepted move; the largest discrepancy is reported.
    pub check_cache: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { iterations: 1000, burnin: 0, lambda: 0.9, seed: 0, obs_variance: None, check_cache: false }
    }
}

/// `Z° = λZ + √(1-λ²) W̄` with `W̄` fresh standard normal noise.
pub fn pcn_propose(z: &Innovations, lambda: f64, rng: &mut dyn RngCore) -> Result<Innovations> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Validation(format!("pCN parameter {lambda} outside [0, 1)")));
    }
    let c = (1.0 - lambda * lambda).sqrt();
    let edges = z
        .edges
        .iter()
        .map(|e| {
            e.as_ref().map(|vs| {
                vs.iter()
                    .map(|v| {
                        v.map(|x| {
                            let w: f64 = StandardNormal.sample(rng);
                            lambda * x + c * w
                        })
                    })
                    .collect()
            })
        })
        .collect();
    Ok(Innovations { edges })
}

/// Parameters `(A + n/2, B + ½ Σ ‖r‖²)` of the inverse-Gamma full
/// conditional, `n` counting scalar residual components.
pub fn obs_variance_posterior(residuals: &[DVector<f64>], shape: f64, scale: f64) -> (f64, f64) {
    let n: usize = residuals.iter().map(|r| r.len()).sum();
    let ss: f64 = residuals.iter().map(|r| r.norm_squared()).sum();
    (shape + n as f64 / 2.0, scale + 0.5 * ss)
}

pub fn sample_inverse_gamma(shape: f64, scale: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| Error::Validation(format!("inverse-Gamma({shape}, {scale}): {e}")))?;
    let mut r = rng;
    Ok(1.0 / g.sample(&mut r))
}

/// Leaf residuals `x_v - x_pa(v)` for isotropic Gaussian emissions.
pub fn leaf_residuals(model: &Model, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
    let g = &model.graph;
    let mut out = Vec::new();
    for v in g.leaves() {
        let EdgeKernel::Gaussian(k) = model.kernel(v)? else {
            return Err(Error::Unsupported(format!("leaf {v} does not have a Gaussian emission")));
        };
        let d = k.aux.target_dim();
        let identity = nalgebra::DMatrix::<f64>::identity(d, d);
        if k.aux.phi != identity || k.aux.beta.iter().any(|b| *b != 0.0) || !is_isotropic(&k.aux.q) {
            return Err(Error::Unsupported(format!(
                "leaf {v} emission is not x_v = x_pa + N(0, εI)"
            )));
        }
        let State::Vector(y) = model.observation(v).ok_or(Error::UnknownVertex(v))? else {
            return Err(Error::Unsupported(format!("leaf {v} has a non-vector observation")));
        };
        let x = match traj.state(g.parents(v)?[0])? {
            State::Vector(x) => x,
            _ => return Err(Error::Unsupported(format!("parent of leaf {v} is not a vector state"))),
        };
        out.push(y - x);
    }
    Ok(out)
}

fn is_isotropic(q: &nalgebra::DMatrix<f64>) -> bool {
    let e = q[(0, 0)];
    q.iter().enumerate().all(|(i, v)| {
        let (r, c) = (i % q.nrows(), i / q.nrows());
        if r == c {
            *v == e
        } else {
            *v == 0.0
        }
    })
}

/// Current point of the chain with everything cached for it.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub model: Model,
    pub backward: BackwardPass,
    pub innovations: Innovations,
    pub trajectory: Trajectory,
    pub ledger: WeightLedger,
    /// `log Ψ = log g_r(x_r) + Σ log w_e`.
    pub log_psi: f64,
}

impl ChainState {
    pub fn new(builder: &ModelBuilder, theta: Vec<f64>, seed: u64) -> Result<Self> {
        let model = builder(&theta)?;
        check_reparameterizable(&model)?;
        let backward = run_backward(&model)?;
        let innovations = draw_innovations(&model, &backward, seed)?;
        Self::evaluate(theta, model, backward, innovations)
    }

    fn evaluate(theta: Vec<f64>, model: Model, backward: BackwardPass, innovations: Innovations) -> Result<Self> {
        let (trajectory, ledger) = run_forward_with(&model, &backward, &innovations, 0)?;
        let log_psi = ledger.total();
        Ok(Self { theta, model, backward, innovations, trajectory, ledger, log_psi })
    }

    /// `log Ψ` from scratch (fresh model, filter and guided pass).
    pub fn recompute_log_psi(&self, builder: &ModelBuilder) -> Result<f64> {
        let model = builder(&self.theta)?;
        let bp = run_backward(&model)?;
        Ok(run_forward_with(&model, &bp, &self.innovations, 0)?.1.total())
    }
}

/// Every non-leaf edge must be driven by the innovations alone.
fn check_reparameterizable(model: &Model) -> Result<()> {
    let g = &model.graph;
    for v in (0..g.len()).filter(|&v| v != g.root() && !g.is_leaf(v)) {
        match model.kernel(v)? {
            EdgeKernel::Sde(_) | EdgeKernel::Gaussian(_) | EdgeKernel::MultiGaussian(_) => {}
            other => {
                return Err(Error::Unsupported(format!(
                    "edge into {v} ({:?} family) has no innovation representation for path updates",
                    other.family()
                )))
            }
        }
    }
    Ok(())
}

/// Innovation update; returns whether the proposal was accepted.
pub fn mcmc_step_path(state: &mut ChainState, lambda: f64, rng: &mut dyn RngCore) -> Result<bool> {
    let proposal = pcn_propose(&state.innovations, lambda, rng)?;
    let Ok((traj, ledger)) = run_forward_with(&state.model, &state.backward, &proposal, 0) else {
        return Ok(false);
    };
    let log_psi = ledger.total();
    if !log_psi.is_finite() {
        return Ok(false);
    }
    let u: f64 = rng.random();
    if u.ln() < log_psi - state.log_psi {
        state.innovations = proposal;
        state.trajectory = traj;
        state.ledger = ledger;
        state.log_psi = log_psi;
        return Ok(true);
    }
    Ok(false)
}

/// Random-walk update of parameter `j`.
pub fn mcmc_step_theta(
    state: &mut ChainState,
    builder: &ModelBuilder,
    params: &[Parameter],
    j: usize,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    let p = &params[j];
    if p.step == 0.0 {
        return Ok(false);
    }
    let z: f64 = StandardNormal.sample(rng);
    let mut theta = state.theta.clone();
    theta[j] += p.step * z;
    let log_prior_ratio = p.prior.log_density(theta[j]) - p.prior.log_density(state.theta[j]);
    if !log_prior_ratio.is_finite() {
        return Ok(false);
    }
    let Some(candidate) = try_evaluate(builder, theta, &state.innovations) else {
        return Ok(false);
    };
    let u: f64 = rng.random();
    if u.ln() < candidate.log_psi - state.log_psi + log_prior_ratio {
        *state = candidate;
        return Ok(true);
    }
    Ok(false)
}

fn try_evaluate(builder: &ModelBuilder, theta: Vec<f64>, innovations: &Innovations) -> Option<ChainState> {
    let model = builder(&theta).ok()?;
    let backward = run_backward(&model).ok()?;
    let s = ChainState::evaluate(theta, model, backward, innovations.clone()).ok()?;
    s.log_psi.is_finite().then_some(s)
}

/// Exact Gibbs draw of the shared leaf variance given the current path; the
/// innovations are then re-derived so that the path is kept.
pub fn conjugate_update_obs_variance(
    state: &mut ChainState,
    builder: &ModelBuilder,
    update: &ObsVarianceUpdate,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let residuals = leaf_residuals(&state.model, &state.trajectory)?;
    let (a, b) = obs_variance_posterior(&residuals, update.shape, update.scale);
    let eps = sample_inverse_gamma(a, b, rng)?;
    let mut theta = state.theta.clone();
    theta[update.parameter] = eps;
    let model = builder(&theta)?;
    let backward = run_backward(&model)?;
    let innovations = innovations_from_trajectory(&model, &backward, &state.trajectory)?;
    *state = ChainState::evaluate(theta, model, backward, innovations)?;
    Ok(())
}

/// One row per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub log_psi: f64,
    pub accepted_path: bool,
    pub accepted_theta: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    pub names: Vec<String>,
    /// Rows after burn-in.
    pub rows: Vec<TraceRow>,
    pub path_acceptance: f64,
    pub theta_acceptance: Vec<f64>,
    /// Largest `|cached - recomputed|` of `log Ψ` over checked moves.
    pub max_cache_error: f64,
}

impl ChainTrace {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.theta[j]).collect())
    }

    pub fn posterior_mean(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    }
}

pub fn run_chain(builder: &ModelBuilder, params: &[Parameter], config: &McmcConfig) -> Result<ChainTrace> {
    if config.iterations == 0 {
        return Err(Error::Validation("the chain needs at least one iteration".into()));
    }
    if !(0.0..1.0).contains(&config.lambda) {
        return Err(Error::Validation(format!("pCN parameter {} outside [0, 1)", config.lambda)));
    }
    if let Some(u) = &config.obs_variance {
        if u.parameter >= params.len() {
            return Err(Error::Validation("variance update refers to an unknown parameter".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 0, 0));
    let theta: Vec<f64> = params.iter().map(|p| p.initial).collect();
    let mut state = ChainState::new(builder, theta, stream_seed(config.seed, 0, 1))?;
    let mut rows = Vec::with_capacity(config.iterations.saturating_sub(config.burnin));
    let mut path_acc = 0usize;
    let mut theta_acc = vec![0usize; params.len()];
    let mut max_cache_error: f64 = 0.0;
    let mut check = |state: &ChainState| -> Result<()> {
        if config.check_cache {
            let fresh = state.recompute_log_psi(builder)?;
            max_cache_error = max_cache_error.max((fresh - state.log_psi).abs());
        }
        Ok(())
    };
    for it in 0..config.iterations {
        let accepted_path = mcmc_step_path(&mut state, config.lambda, &mut rng)?;
        if accepted_path {
            path_acc += 1;
            check(&state)?;
        }
        let mut accepted_theta = vec![false; params.len()];
        for j in 0..params.len() {
            if config.obs_variance.as_ref().is_some_and(|u| u.parameter == j) {
                continue;
            }
            if mcmc_step_theta(&mut state, builder, params, j, &mut rng)? {
                accepted_theta[j] = true;
                theta_acc[j] += 1;
                check(&state)?;
            }
        }
        if let Some(u) = &config.obs_variance {
            conjugate_update_obs_variance(&mut state, builder, u, &mut rng)?;
            accepted_theta[u.parameter] = true;
            theta_acc[u.parameter] += 1;
            check(&state)?;
        }
        if it >= config.burnin {
            rows.push(TraceRow {
                iteration: it,
                theta: state.theta.clone(),
                log_psi: state.log_psi,
                accepted_path,
                accepted_theta,
            });
        }
    }
    let n = config.iterations as f64;
    Ok(ChainTrace {
        names: params.iter().map(|p| p.name.clone()).collect(),
        rows,
        path_acceptance: path_acc as f64 / n,
        theta_acceptance: theta_acc.iter().map(|&a| a as f64 / n).collect(),
        max_cache_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{GaussKernel, LinearGauss};
    use crate::graph::Graph;
    use crate::stats::{ks_one_sample, mean_and_se};
    use nalgebra::DMatrix;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn one(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    /// `x_1 = θ + N(0, 1)`, `y = x_1 + N(0, s²)`.
    fn line_builder(y: f64, s2: f64) -> ModelBuilder {
        Arc::new(move |theta: &[f64]| {
            let graph = Graph::tree(0, 3, &[(0, 1), (1, 2)])?;
            let e1 = LinearGauss::new(one(0.0), DVector::from_element(1, theta[0]), one(1.0))?;
            let e2 = LinearGauss::new(one(1.0), DVector::zeros(1), one(s2))?;
            Model::new(
                graph,
                vec![None, Some(EdgeKernel::Gaussian(GaussKernel::linear(e1))), Some(EdgeKernel::Gaussian(GaussKernel::linear(e2)))],
                State::Vector(DVector::zeros(1)),
                vec![None, None, Some(State::Vector(DVector::from_element(1, y)))],
            )
        })
    }

    #[test]
    fn pcn_limits_and_marginal_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Innovations { edges: vec![None, Some(vec![DVector::from_element(3, 0.7); 2000])] };
        let fresh = pcn_propose(&z, 0.0, &mut rng).unwrap();
        assert_ne!(fresh, z);
        let near = pcn_propose(&z, 0.999, &mut rng).unwrap();
        let d: f64 = near.flatten().iter().zip(z.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 0.2);
        assert!(pcn_propose(&z, 1.0, &mut rng).is_err());
        // repeated proposals from standard normal innovations stay standard normal
        let mut cur = pcn_propose(&z, 0.0, &mut rng).unwrap();
        for _ in 0..10 {
            cur = pcn_propose(&cur, 0.9, &mut rng).unwrap();
        }
        let n = Normal::new(0.0, 1.0).unwrap();
        assert!(ks_one_sample(&cur.flatten(), |x| n.cdf(x)).unwrap().p_value > 0.01);
    }

    #[test]
    fn identical_proposal_is_accepted_and_theta_fixed_point() {
        let b = line_builder(1.0, 0.5);
        let mut state = ChainState::new(&b, vec![0.3], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // κ̃ = κ makes Ψ the exact likelihood, independent of the path
        assert!(mcmc_step_path(&mut state, 1.0 - 1e-12, &mut rng).unwrap());
        let params = [Parameter { name: "t".into(), initial: 0.3, step: 0.0, prior: Prior::Flat }];
        assert!(!mcmc_step_theta(&mut state, &b, &params, 0, &mut rng).unwrap());
        assert!((state.recompute_log_psi(&b).unwrap() - state.log_psi).abs() < 1e-12);
    }

    #[test]
    fn linear_gaussian_posterior_of_drift() {
        // y | θ ~ N(θ, 1 + s²); θ ~ N(0, 1)
        let (y, s2) = (1.4, 0.5);
        let b = line_builder(y, s2);
        let params = [Parameter { name: "theta".into(), initial: 0.0, step: 1.2, prior: Prior::Normal { mean: 0.0, sd: 1.0 } }];
        let cfg = McmcConfig { iterations: 20_000, burnin: 500, lambda: 0.5, seed: 9, obs_variance: None, check_cache: false };
        let trace = run_chain(&b, &params, &cfg).unwrap();
        let v = 1.0 + s2;
        let post_mean = y / v / (1.0 + 1.0 / v);
        let c = trace.column("theta").unwrap();
        // thin to reduce autocorrelation before the standard error
        let thinned: Vec<f64> = c.iter().step_by(10).copied().collect();
        let (m, se) = mean_and_se(&thinned);
        assert!((m - post_mean).abs() < 3.0 * se + 0.02, "{m} vs {post_mean} (se {se})");
    }

    #[test]
    fn prior_only_target_samples_the_prior() {
        let b = line_builder(0.0, 1.0);
        let flat: ModelBuilder = Arc::new(move |_: &[f64]| b(&[0.0]));
        let params = [Parameter { name: "p".into(), initial: 2.0, step: 1.5, prior: Prior::Normal { mean: 2.0, sd: 0.5 } }];
        let cfg = McmcConfig { iterations: 20_000, burnin: 1000, lambda: 0.0, seed: 2, obs_variance: None, check_cache: false };
        let trace = run_chain(&flat, &params, &cfg).unwrap();
        let c = trace.column("p").unwrap();
        let (m, _) = mean_and_se(&c);
        let sd = (c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c.len() as f64).sqrt();
        assert!((m - 2.0).abs() < 0.05 && (sd - 0.5).abs() < 0.05, "{m} {sd}");
    }

    #[test]
    fn conjugate_posterior_parameters() {
        let (a, b) = obs_variance_posterior(&[], 2.0, 0.005);
        assert_eq!((a, b), (2.0, 0.005));
        let r = vec![DVector::from_vec(vec![0.1, -0.2]), DVector::from_vec(vec![0.3, 0.0])];
        let (a, b) = obs_variance_posterior(&r, 2.0, 0.005);
        assert_eq!(a, 4.0);
        assert!((b - (0.005 + 0.5 * 0.14)).abs() < 1e-15);
    }
}
