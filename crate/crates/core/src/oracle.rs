//! Brute-force and closed-form reference values.
//!
//! Nothing here calls the filtering code: finite-state models are summed
//! over all hidden configurations, and linear SDEs use their Gaussian
//! transition laws. The matrix exponential is a separate Taylor
//! implementation with scaling and squaring.

use nalgebra::{DMatrix, DVector};

use crate::engine::{EdgeKernel, Model, State};
use crate::error::{Error, Result};
use crate::graph::VertexId;

/// Upper bound on the number of enumerated joint configurations.
pub const MAX_CONFIGURATIONS: usize = 1_000_000;

/// `exp(A)` by a truncated Taylor series after scaling by `2^-s`.
pub fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).sum::<f64>();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.iter().all(|v| v.abs() < 1e-300) {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Transition matrix of the edge into `v`, rows indexed by parent configurations.
fn transition(model: &Model, v: VertexId) -> Result<DMatrix<f64>> {
    match model.kernel(v)? {
        EdgeKernel::Finite(k) => Ok(k.forward_matrix().clone()),
        EdgeKernel::MultiFinite(k) => Ok(k.kernel.forward_matrix().clone()),
        EdgeKernel::Ctmc(e) => Ok(taylor_expm(&(&e.q * e.tau))),
        _ => Err(Error::Unsupported(format!("enumeration needs finite-state kernels (edge into {v})"))),
    }
}

fn state_count(v: VertexId, trans: &[Option<DMatrix<f64>>]) -> usize {
    trans[v].as_ref().map(|t| t.ncols()).unwrap_or(0)
}

struct Enumeration {
    hidden: Vec<VertexId>,
    sizes: Vec<usize>,
    weights: Vec<f64>,
}

fn enumerate(model: &Model) -> Result<Enumeration> {
    let g = &model.graph;
    let n = g.len();
    let root = g.root();
    let State::Discrete(x_root) = model.root_value else {
        return Err(Error::Unsupported("enumeration needs a discrete root value".into()));
    };
    let mut trans: Vec<Option<DMatrix<f64>>> = vec![None; n];
    for v in (0..n).filter(|&v| v != root) {
        trans[v] = Some(transition(model, v)?);
    }
    let hidden: Vec<VertexId> = (0..n).filter(|&v| v != root && !g.is_leaf(v)).collect();
    let sizes: Vec<usize> = hidden.iter().map(|&v| state_count(v, &trans)).collect();
    let total = sizes.iter().try_fold(1usize, |acc, &r| acc.checked_mul(r)).unwrap_or(usize::MAX);
    if total > MAX_CONFIGURATIONS {
        return Err(Error::SizeBound(format!(
            "{total} joint configurations exceed the enumeration bound {MAX_CONFIGURATIONS}"
        )));
    }
    let mut value = vec![0usize; n];
    value[root] = x_root;
    for v in g.leaves() {
        match model.observation(v) {
            Some(State::Discrete(k)) => value[v] = *k,
            _ => return Err(Error::Unsupported(format!("leaf {v} needs a discrete observation"))),
        }
    }
    let mut weights = Vec::with_capacity(total);
    let mut digits = vec![0usize; hidden.len()];
    for _ in 0..total {
        for (i, &v) in hidden.iter().enumerate() {
            value[v] = digits[i];
        }
        let mut w = 1.0;
        for v in (0..n).filter(|&v| v != root) {
            let pa = g.parents(v)?;
            let sizes_pa: Vec<usize> = match model.kernel(v)? {
                EdgeKernel::MultiFinite(k) => k.parent_states.clone(),
                _ => vec![trans[v].as_ref().map(|t| t.nrows()).unwrap_or(1)],
            };
            let mut row = 0;
            for (&u, &r) in pa.iter().zip(&sizes_pa) {
                row = row * r + value[u];
            }
            let t = trans[v].as_ref().expect("non-root vertices have kernels");
            if row >= t.nrows() || value[v] >= t.ncols() {
                return Err(Error::Dimension(format!("state out of range on the edge into {v}")));
            }
            w *= t[(row, value[v])];
        }
        weights.push(w);
        // odometer increment, last hidden vertex fastest
        for i in (0..digits.len()).rev() {
            digits[i] += 1;
            if digits[i] < sizes[i] {
                break;
            }
            digits[i] = 0;
        }
    }
    Ok(Enumeration { hidden, sizes, weights })
}

/// Exact likelihood of the leaf observations given the root value.
pub fn enumerate_likelihood(model: &Model) -> Result<f64> {
    Ok(enumerate(model)?.weights.iter().sum())
}

/// Exact posterior over hidden (non-root, non-leaf) vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    pub hidden: Vec<VertexId>,
    pub sizes: Vec<usize>,
    /// Probabilities of joint configurations; the last hidden vertex varies fastest.
    pub pmf: Vec<f64>,
}

impl Conditional {
    pub fn marginal(&self, v: VertexId) -> Result<Vec<f64>> {
        let i = self.hidden.iter().position(|&u| u == v).ok_or(Error::UnknownVertex(v))?;
        let stride: usize = self.sizes[i + 1..].iter().product();
        let mut out = vec![0.0; self.sizes[i]];
        for (c, p) in self.pmf.iter().enumerate() {
            out[(c / stride) % self.sizes[i]] += p;
        }
        Ok(out)
    }

    /// Index of a joint configuration listed in `hidden` order.
    pub fn index(&self, config: &[usize]) -> usize {
        config.iter().zip(&self.sizes).fold(0, |acc, (&x, &r)| acc * r + x)
    }
}

pub fn enumerate_conditional(model: &Model) -> Result<Conditional> {
    let e = enumerate(model)?;
    let z: f64 = e.weights.iter().sum();
    if !(z > 0.0) {
        return Err(Error::numeric("enumeration", "observations have zero likelihood"));
    }
    Ok(Conditional { hidden: e.hidden, sizes: e.sizes, pmf: e.weights.iter().map(|w| w / z).collect() })
}

/// Linear SDE `dX = (BX + β)dt + σ dW` in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSde {
    pub b: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Gaussian law `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Normal {
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let d = x.len() as f64;
        let ch = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("oracle normal density", "covariance is not positive definite"))?;
        let r = x - &self.mean;
        let sol = ch.solve(&r);
        let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol)))
    }
}

impl LinearSde {
    /// `e^{Bt}` and the affine offset `∫_0^t e^{Bs} ds β`, via one augmented exponential.
    fn flow(&self, t: f64) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.b.nrows();
        let mut aug = DMatrix::zeros(d + 1, d + 1);
        aug.view_mut((0, 0), (d, d)).copy_from(&(&self.b * t));
        aug.view_mut((0, d), (d, 1)).copy_from(&(&self.beta * t));
        let e = taylor_expm(&aug);
        (e.view((0, 0), (d, d)).into_owned(), e.view((0, d), (d, 1)).column(0).into_owned())
    }

    /// Covariance `∫_0^t e^{Bs} σσ' e^{B's} ds` by the block-exponential identity.
    fn covariance(&self, t: f64) -> DMatrix<f64> {
        let d = self.b.nrows();
        let a = &self.sigma * self.sigma.transpose();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&(-&self.b * t));
        m.view_mut((0, d), (d, d)).copy_from(&(a * t));
        m.view_mut((d, d), (d, d)).copy_from(&(self.b.transpose() * t));
        let e = taylor_expm(&m);
        let f22 = e.view((d, d), (d, d)).into_owned();
        let f12 = e.view((0, d), (d, d)).into_owned();
        let c = f22.transpose() * f12;
        (&c + c.transpose()) * 0.5
    }

    /// Law of `X_t` given `X_0 = x0`.
    pub fn transition(&self, t: f64, x0: &DVector<f64>) -> Normal {
        let (phi, off) = self.flow(t);
        Normal { mean: phi * x0 + off, cov: self.covariance(t) }
    }

    pub fn transition_log_density(&self, t: f64, x0: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.transition(t, x0).log_density(x)
    }

    /// Law of `X_t` given `X_0 = x0` and `X_τ = v`, for `0 < t < τ`.
    pub fn bridge_marginal(&self, t: f64, tau: f64, x0: &DVector<f64>, v: &DVector<f64>) -> Result<Normal> {
        let xt = self.transition(t, x0);
        let (phi, off) = self.flow(tau - t);
        let q = self.covariance(tau - t);
        condition_linear(&xt, &phi, &off, &q, v)
    }

    /// Law of `X_τ` given `X_0 = x0` and a noisy observation `y = X_τ + N(0, Σ)`.
    pub fn endpoint_posterior(&self, tau: f64, x0: &DVector<f64>, y: &DVector<f64>, obs_cov: &DMatrix<f64>) -> Result<Normal> {
        let d = x0.len();
        condition_linear(&self.transition(tau, x0), &DMatrix::identity(d, d), &DVector::zeros(d), obs_cov, y)
    }
}

/// Law of `X ~ prior` given `Y = ΦX + c + N(0, Q)` observed at `y`.
fn condition_linear(prior: &Normal, phi: &DMatrix<f64>, c: &DVector<f64>, q: &DMatrix<f64>, y: &DVector<f64>) -> Result<Normal> {
    let s = phi * &prior.cov * phi.transpose() + q;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::numeric("oracle conditioning", "innovation covariance is singular"))?;
    let gain = &prior.cov * phi.transpose() * s_inv;
    let mean = &prior.mean + &gain * (y - phi * &prior.mean - c);
    let cov = &prior.cov - &gain * phi * &prior.cov;
    Ok(Normal { mean, cov: (&cov + cov.transpose()) * 0.5 })
}

/// Scalar OU oracle `dX = (bX + β)dt + σ dW`.
pub fn ou_bridge_oracle(b: f64, beta: f64, sigma: f64) -> LinearSde {
    LinearSde {
        b: DMatrix::from_element(1, 1, b),
        beta: DVector::from_element(1, beta),
        sigma: DMatrix::from_element(1, 1, sigma),
    }
}
