//! Agent-based SIS epidemics guided through infection-count potentials.
//!
//! Each agent `i` is infected at the next step with probability
//! `α_i(x) = (λ_i a_i(x))^{1-x_i} (1-γ_i)^{x_i}`, where `a_i(x)` is the
//! infected fraction of its neighbourhood. The auxiliary dynamics replace
//! the network by a mean field depending on the count `I(x)` only, so
//! potentials are vectors indexed by `0..=N`.

use nalgebra::DVector;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::finite::{log_row_dot, sample_categorical, tilted_pmf, VecPotential};
use crate::potential::{GuidedKernel, Potential};
use crate::scalar::{lit, neg_inf, to_f64, Real};

/// Exact Poisson-binomial pmf by iterative convolution.
pub fn poibin_pmf<T: Real>(probs: &[T]) -> Result<Vec<T>> {
    let mut pmf = vec![T::zero(); probs.len() + 1];
    pmf[0] = T::one();
    for (n, &p) in probs.iter().enumerate() {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(Error::Validation(format!(
                "success probability {} at position {n} outside [0, 1]",
                to_f64(p)
            )));
        }
        let q = T::one() - p;
        for k in (1..=n + 1).rev() {
            pmf[k] = pmf[k] * q + pmf[k - 1] * p;
        }
        pmf[0] *= q;
    }
    Ok(pmf)
}

/// Potential on configurations through their infection count.
#[derive(Clone, Debug, PartialEq)]
pub struct CountPotential<T: Real> {
    pub psi: VecPotential<T>,
}

impl<T: Real> CountPotential<T> {
    pub fn ones(n: usize) -> Self {
        Self { psi: VecPotential::ones(n + 1) }
    }

    pub fn population(&self) -> usize {
        self.psi.len() - 1
    }

    pub fn log_at_count(&self, s: usize) -> Result<T> {
        self.psi.log_at(s)
    }

    /// `ψ(i) = C(i, v) ρ^v (1-ρ)^{i-v}` for `v <= i <= N`, zero below `v`.
    pub fn init_leaf(v: usize, rho: T, n: usize) -> Result<Self> {
        if v > n {
            return Err(Error::Validation(format!("reported count {v} exceeds population {n}")));
        }
        if !(rho >= T::zero() && rho <= T::one()) {
            return Err(Error::Validation(format!("reporting probability {} outside [0, 1]", to_f64(rho))));
        }
        let mut log = DVector::from_element(n + 1, neg_inf::<T>());
        for i in v..=n {
            log[i] = log_binomial_coefficient::<T>(i, v)
                + xlogy(lit::<T>(v as f64), rho)
                + xlogy(lit::<T>((i - v) as f64), T::one() - rho);
        }
        if log.iter().all(|l| *l == neg_inf::<T>()) {
            return Err(Error::Validation(format!(
                "reported count {v} is impossible with reporting probability {}",
                to_f64(rho)
            )));
        }
        Ok(Self { psi: VecPotential::from_log(log) })
    }

    pub fn fuse_all(gs: &[Self]) -> Result<Self> {
        let inner: Vec<VecPotential<T>> = gs.iter().map(|g| g.psi.clone()).collect();
        Ok(Self { psi: VecPotential::fuse_all(&inner)? })
    }
}

/// `k log y` with the convention `0 log 0 = 0`.
fn xlogy<T: Real>(k: T, y: T) -> T {
    if k == T::zero() {
        T::zero()
    } else if y == T::zero() {
        neg_inf()
    } else {
        k * y.ln()
    }
}

fn log_binomial_coefficient<T: Real>(n: usize, k: usize) -> T {
    let k = k.min(n - k);
    let mut s = T::zero();
    for j in 0..k {
        s += lit::<T>((n - j) as f64).ln() - lit::<T>((j + 1) as f64).ln();
    }
    s
}

pub fn infected_count(x: &[bool]) -> usize {
    x.iter().filter(|&&b| b).count()
}

impl<T: Real> Potential for CountPotential<T> {
    type State = Vec<bool>;
    type Scalar = T;

    fn log_eval(&self, x: &Vec<bool>) -> Result<T> {
        if x.len() != self.population() {
            return Err(Error::Dimension(format!(
                "configuration of {} agents against count potential for {}",
                x.len(),
                self.population()
            )));
        }
        self.log_at_count(infected_count(x))
    }

    fn fuse(gs: &[Self]) -> Result<Self> {
        Self::fuse_all(gs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SisKernel<T: Real> {
    pub lambda: Vec<T>,
    pub gamma: Vec<T>,
    pub neighbors: Vec<Vec<usize>>,
    pub aux_lambda: T,
    pub aux_gamma: T,
}

impl<T: Real> SisKernel<T> {
    /// Auxiliary parameters default to the population means of `λ_i`, `γ_i`.
    pub fn new(lambda: Vec<T>, gamma: Vec<T>, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = lambda.len();
        if n == 0 {
            return Err(Error::Validation("empty population".into()));
        }
        let nn: T = lit(n as f64);
        let aux_lambda = lambda.iter().fold(T::zero(), |a, &b| a + b) / nn;
        let aux_gamma = gamma.iter().fold(T::zero(), |a, &b| a + b) / nn;
        Self::with_aux(lambda, gamma, neighbors, aux_lambda, aux_gamma)
    }

    pub fn with_aux(
        lambda: Vec<T>,
        gamma: Vec<T>,
        neighbors: Vec<Vec<usize>>,
        aux_lambda: T,
        aux_gamma: T,
    ) -> Result<Self> {
        let n = lambda.len();
        if gamma.len() != n || neighbors.len() != n {
            return Err(Error::Dimension(format!(
                "{} infection rates, {} recovery rates, {} neighbourhoods",
                n,
                gamma.len(),
                neighbors.len()
            )));
        }
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !lambda.iter().chain(gamma.iter()).all(|&v| unit(v)) || !unit(aux_lambda) || !unit(aux_gamma) {
            return Err(Error::Validation("SIS probabilities must lie in [0, 1]".into()));
        }
        for (i, nb) in neighbors.iter().enumerate() {
            if let Some(&j) = nb.iter().find(|&&j| j >= n) {
                return Err(Error::Validation(format!("agent {i} lists unknown neighbour {j}")));
            }
        }
        Ok(Self { lambda, gamma, neighbors, aux_lambda, aux_gamma })
    }

    /// Fully connected population with homogeneous rates, for which the
    /// forward dynamics depend on the count only (up to excluding oneself).
    pub fn complete_graph(n: usize, lambda: T, gamma: T) -> Result<Self> {
        let neighbors = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        Self::new(vec![lambda; n], vec![gamma; n], neighbors)
    }

    pub fn population(&self) -> usize {
        self.lambda.len()
    }

    pub fn infection_probabilities(&self, x: &[bool]) -> Result<Vec<T>> {
        if x.len() != self.population() {
            return Err(Error::Dimension(format!(
                "configuration of {} agents for population {}",
                x.len(),
                self.population()
            )));
        }
        Ok((0..x.len())
            .map(|i| {
                if x[i] {
                    T::one() - self.gamma[i]
                } else {
                    let nb = &self.neighbors[i];
                    let a = if nb.is_empty() {
                        T::zero()
                    } else {
                        lit::<T>(nb.iter().filter(|&&j| x[j]).count() as f64) / lit::<T>(nb.len() as f64)
                    };
                    self.lambda[i] * a
                }
            })
            .collect())
    }

    /// Law of the next infection count under the auxiliary dynamics from
    /// a configuration with `s` infected agents.
    pub fn aux_count_pmf(&self, s: usize) -> Result<Vec<T>> {
        let n = self.population();
        let p0 = self.aux_lambda * lit::<T>(s as f64) / lit::<T>(n as f64);
        let p1 = T::one() - self.aux_gamma;
        let mut probs = vec![p0; n - s];
        probs.extend(std::iter::repeat_n(p1, s));
        poibin_pmf(&probs)
    }

    fn check(&self, g: &CountPotential<T>) -> Result<()> {
        if g.population() != self.population() {
            return Err(Error::Dimension(format!(
                "count potential for population {} against kernel for {}",
                g.population(),
                self.population()
            )));
        }
        Ok(())
    }

    pub fn guided_count_pmf(&self, g: &CountPotential<T>, x: &[bool]) -> Result<Vec<f64>> {
        self.check(g)?;
        let pmf = poibin_pmf(&self.infection_probabilities(x)?)?;
        tilted_pmf(&pmf, &g.psi.log)
    }

    /// `log E ψ(U)`, `U ~ PoiBin(α_1(x), …, α_N(x))`.
    pub fn log_forward_integral(&self, g: &CountPotential<T>, x: &[bool]) -> Result<T> {
        self.check(g)?;
        let pmf = poibin_pmf(&self.infection_probabilities(x)?)?;
        Ok(log_row_dot(&pmf, &g.psi.log))
    }
}

/// Draw independent Bernoulli(`probs_i`) variables conditioned on their sum.
pub fn sample_conditional_bernoulli<T: Real>(probs: &[T], total: usize, rng: &mut dyn RngCore) -> Result<Vec<bool>> {
    let n = probs.len();
    if total > n {
        return Err(Error::Sampling(format!("cannot place {total} successes among {n} trials")));
    }
    let p: Vec<f64> = probs.iter().map(|v| to_f64(*v)).collect();
    // tail[i][k] = P(sum_{l >= i} Y_l = k)
    let mut tail = vec![vec![0.0f64; n + 2]; n + 1];
    tail[n][0] = 1.0;
    for i in (0..n).rev() {
        for k in 0..=(n - i) {
            let stay = tail[i + 1][k] * (1.0 - p[i]);
            let take = if k > 0 { tail[i + 1][k - 1] * p[i] } else { 0.0 };
            tail[i][k] = stay + take;
        }
    }
    if !(tail[0][total] > 0.0) {
        return Err(Error::Sampling(format!("sum {total} has probability zero")));
    }
    let mut out = Vec::with_capacity(n);
    let mut remaining = total;
    for i in 0..n {
        if remaining == 0 {
            out.push(false);
            continue;
        }
        let take = p[i] * tail[i + 1][remaining - 1] / tail[i][remaining];
        let y = rng.random::<f64>() < take;
        if y {
            remaining -= 1;
        }
        out.push(y);
    }
    Ok(out)
}

impl<T: Real> GuidedKernel for SisKernel<T> {
    type Potential = CountPotential<T>;

    fn pullback(&self, g: &CountPotential<T>) -> Result<CountPotential<T>> {
        self.check(g)?;
        let n = self.population();
        let mut log = DVector::from_element(n + 1, neg_inf::<T>());
        for s in 0..=n {
            log[s] = log_row_dot(&self.aux_count_pmf(s)?, &g.psi.log);
        }
        Ok(CountPotential { psi: VecPotential::from_log(log) })
    }

    fn guided_sample(&self, g: &CountPotential<T>, x: &Vec<bool>, rng: &mut dyn RngCore) -> Result<Vec<bool>> {
        let counts = self
            .guided_count_pmf(g, x)
            .map_err(|e| Error::Sampling(format!("from {} infected: {e}", infected_count(x))))?;
        let j = sample_categorical(&counts, rng);
        sample_conditional_bernoulli(&self.infection_probabilities(x)?, j, rng)
    }

    fn log_weight(&self, g: &CountPotential<T>, g_edge: &CountPotential<T>, x: &Vec<bool>) -> Result<T> {
        let den = g_edge.log_eval(x)?;
        if den == neg_inf::<T>() {
            return Ok(neg_inf());
        }
        Ok(self.log_forward_integral(g, x)? - den)
    }
}
