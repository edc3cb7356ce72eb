//! Wright–Fisher diffusion edges filtered in a shifted-Chebyshev basis.
//!
//! Potentials live in the span of `ψ_k(x) = T_k(2x - 1)`, `k = 0..=K`, and
//! are kept both as coefficients and as values at the Chebyshev–Lobatto
//! nodes `x_j = (cos(jπ/K) + 1)/2`. The generator
//! `L = b(x) d/dx + ½ x(1-x) d²/dx²` with `b(x) = β₁(1-x) + β₂x` maps this
//! span into itself, so backward filtering reduces to a linear ODE.

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::expm;
use crate::potential::Potential;
use crate::scalar::{is_finite, lit, neg_inf, to_f64, Real};

/// Euler–Maruyama states are clamped to `[ε, 1 - ε]`.
pub const BOUNDARY_CLAMP: f64 = 1e-6;

/// Lobatto node `j` of `K + 1` on `[0, 1]`.
pub fn lobatto_node(j: usize, k: usize) -> f64 {
    ((j as f64 * std::f64::consts::PI / k as f64).cos() + 1.0) / 2.0
}

fn cos_table(k: usize) -> Vec<Vec<f64>> {
    (0..=k)
        .map(|j| {
            (0..=k)
                .map(|m| ((j * m) as f64 * std::f64::consts::PI / k as f64).cos())
                .collect()
        })
        .collect()
}

/// Values at the Lobatto nodes from Chebyshev coefficients (DCT-I).
pub fn coeffs_to_values<T: Real>(coeffs: &DVector<T>) -> DVector<T> {
    let k = coeffs.len() - 1;
    let table = cos_table(k);
    DVector::from_fn(k + 1, |j, _| {
        (0..=k).fold(T::zero(), |acc, m| acc + coeffs[m] * lit::<T>(table[j][m]))
    })
}

/// Chebyshev coefficients of the interpolant through the Lobatto values.
pub fn values_to_coeffs<T: Real>(values: &DVector<T>) -> DVector<T> {
    let k = values.len() - 1;
    let table = cos_table(k);
    let half = |i: usize| if i == 0 || i == k { 0.5 } else { 1.0 };
    DVector::from_fn(k + 1, |m, _| {
        let s = (0..=k).fold(T::zero(), |acc, j| acc + values[j] * lit::<T>(half(j) * table[j][m]));
        s * lit::<T>(2.0 * half(m) / k as f64)
    })
}

/// `Σ_k λ_k T_k(t)` by Clenshaw's recurrence.
pub fn clenshaw<T: Real>(coeffs: &DVector<T>, t: T) -> T {
    let two_t = t + t;
    let mut b1 = T::zero();
    let mut b2 = T::zero();
    for k in (1..coeffs.len()).rev() {
        let b0 = coeffs[k] + two_t * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    coeffs[0] + t * b1 - b2
}

/// Coefficients of `d/dx Σ λ_k ψ_k(x)` in the same basis (degree drops by one).
pub fn derivative_coeffs<T: Real>(coeffs: &DVector<T>) -> DVector<T> {
    let n = coeffs.len();
    let mut d = DVector::zeros(n);
    if n < 2 {
        return d;
    }
    // d/dt recurrence c'_{k-1} = c'_{k+1} + 2k c_k, then chain rule factor 2
    for k in (1..n).rev() {
        let next = if k + 1 < n { d[k + 1] } else { T::zero() };
        d[k - 1] = next + lit::<T>(2.0 * k as f64) * coeffs[k];
    }
    d[0] *= lit::<T>(0.5);
    d * lit::<T>(2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChebPotential<T: Real> {
    pub coeffs: DVector<T>,
    pub values: DVector<T>,
}

impl<T: Real> ChebPotential<T> {
    pub fn from_coeffs(coeffs: DVector<T>) -> Result<Self> {
        if coeffs.len() < 2 {
            return Err(Error::Validation("Chebyshev potentials need degree K >= 1".into()));
        }
        let values = coeffs_to_values(&coeffs);
        Ok(Self { coeffs, values })
    }

    pub fn from_values(values: DVector<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Validation("Chebyshev potentials need degree K >= 1".into()));
        }
        let coeffs = values_to_coeffs(&values);
        Ok(Self { coeffs, values })
    }

    pub fn ones(k: usize) -> Result<Self> {
        Self::from_values(DVector::from_element(k + 1, T::one()))
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, x: T) -> T {
        clenshaw(&self.coeffs, x + x - T::one())
    }

    /// `o(x) = C(n, v) x^v (1 - x)^{n-v}` sampled at the nodes.
    pub fn init_leaf(n: usize, v: usize, k: usize) -> Result<Self> {
        if v > n {
            return Err(Error::Validation(format!("observed count {v} exceeds sample size {n}")));
        }
        if k == 0 {
            return Err(Error::Validation("Chebyshev potentials need degree K >= 1".into()));
        }
        let values = DVector::from_fn(k + 1, |j, _| lit::<T>(binomial_likelihood(n, v, lobatto_node(j, k))));
        Self::from_values(values)
    }

    pub fn fuse_all(gs: &[Self]) -> Result<Self> {
        let first = gs
            .first()
            .ok_or_else(|| Error::Validation("fusion of an empty list".into()))?;
        let mut values = first.values.clone();
        for g in &gs[1..] {
            if g.degree() != first.degree() {
                return Err(Error::Dimension(format!(
                    "fusing Chebyshev potentials of degrees {} and {}",
                    first.degree(),
                    g.degree()
                )));
            }
            values.component_mul_assign(&g.values);
        }
        if gs.len() == 1 {
            return Ok(first.clone());
        }
        Self::from_values(values)
    }
}

pub fn binomial_likelihood(n: usize, v: usize, x: f64) -> f64 {
    let mut log_c = 0.0;
    for j in 0..v.min(n - v) {
        log_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
    }
    let pv = if v == 0 { 1.0 } else { x.powi(v as i32) };
    let qv = if n == v { 1.0 } else { (1.0 - x).powi((n - v) as i32) };
    log_c.exp() * pv * qv
}

impl<T: Real> Potential for ChebPotential<T> {
    type State = T;
    type Scalar = T;

    fn log_eval(&self, x: &T) -> Result<T> {
        let g = self.eval(*x);
        if g > T::zero() {
            Ok(g.ln())
        } else if g == T::zero() {
            Ok(neg_inf())
        } else {
            Err(Error::Domain(format!(
                "Chebyshev potential is negative ({:.3e}) at x = {}",
                to_f64(g),
                to_f64(*x)
            )))
        }
    }

    fn fuse(gs: &[Self]) -> Result<Self> {
        Self::fuse_all(gs)
    }
}

type Poly = Vec<BigRational>;

fn poly_trim(mut p: Poly) -> Poly {
    while p.len() > 1 && p.last().is_some_and(|c| c.is_zero()) {
        p.pop();
    }
    p
}

fn poly_add(a: &Poly, b: &Poly) -> Poly {
    let n = a.len().max(b.len());
    let zero = BigRational::zero();
    poly_trim((0..n).map(|i| a.get(i).unwrap_or(&zero) + b.get(i).unwrap_or(&zero)).collect())
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = vec![BigRational::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    poly_trim(out)
}

fn poly_scale(a: &Poly, s: &BigRational) -> Poly {
    poly_trim(a.iter().map(|c| c * s).collect())
}

fn poly_deriv(a: &Poly) -> Poly {
    if a.len() <= 1 {
        return vec![BigRational::zero()];
    }
    poly_trim(
        a.iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| c * BigRational::from_integer(BigInt::from(i)))
            .collect(),
    )
}

fn rat(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Monomial coefficients (in `x`) of `ψ_0..ψ_K`.
fn shifted_chebyshev_monomials(k: usize) -> Vec<Poly> {
    let t = vec![rat(-1), rat(2)]; // 2x - 1
    let mut out: Vec<Poly> = vec![vec![rat(1)], t.clone()];
    for m in 2..=k {
        let next = poly_add(&poly_scale(&poly_mul(&t, &out[m - 1]), &rat(2)), &poly_scale(&out[m - 2], &rat(-1)));
        out.push(next);
    }
    out.truncate(k + 1);
    out
}

/// Exact generator matrix: column `k` holds the basis coordinates of `L ψ_k`.
pub fn generator_matrix_exact(beta1: f64, beta2: f64, k: usize) -> Result<Vec<Vec<BigRational>>> {
    if k == 0 {
        return Err(Error::Validation("generator needs K >= 1".into()));
    }
    let b1 = BigRational::from_float(beta1)
        .ok_or_else(|| Error::Validation(format!("mutation rate {beta1} is not finite")))?;
    let b2 = BigRational::from_float(beta2)
        .ok_or_else(|| Error::Validation(format!("mutation rate {beta2} is not finite")))?;
    if b1 < BigRational::zero() || b2 < BigRational::zero() {
        return Err(Error::Validation("mutation rates must be nonnegative".into()));
    }
    let basis = shifted_chebyshev_monomials(k);
    // b(x) = β₁ + (β₂ - β₁) x ; a(x)/2 = (x - x²)/2
    let drift: Poly = poly_trim(vec![b1.clone(), &b2 - &b1]);
    let half_a: Poly = vec![BigRational::zero(), BigRational::new(1.into(), 2.into()), BigRational::new((-1).into(), 2.into())];
    let mut q = vec![vec![BigRational::zero(); k + 1]; k + 1];
    for (col, psi) in basis.iter().enumerate() {
        let d1 = poly_deriv(psi);
        let d2 = poly_deriv(&d1);
        let mut image = poly_add(&poly_mul(&drift, &d1), &poly_mul(&half_a, &d2));
        // back-substitute in the triangular basis, highest degree first
        for m in (0..=k).rev() {
            let lead = &basis[m][m];
            let c = image.get(m).cloned().unwrap_or_else(BigRational::zero);
            if c.is_zero() {
                continue;
            }
            let coef = &c / lead;
            image = poly_add(&image, &poly_scale(&basis[m], &(-&coef)));
            q[m][col] = coef;
        }
        debug_assert!(image.iter().all(|c| c.is_zero()));
    }
    Ok(q)
}

pub fn generator_matrix<T: Real>(beta1: f64, beta2: f64, k: usize) -> Result<DMatrix<T>> {
    let exact = generator_matrix_exact(beta1, beta2, k)?;
    Ok(DMatrix::from_fn(k + 1, k + 1, |i, j| {
        lit::<T>(exact[i][j].to_f64().unwrap_or(f64::NAN))
    }))
}

/// Wright–Fisher diffusion edge of duration `τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WrightFisherEdge<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub degree: usize,
    pub tau: T,
    pub steps: usize,
    pub generator: DMatrix<T>,
}

/// Coefficient trajectory `λ(u_m)` on the integration grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebBackward<T: Real> {
    pub grid: Vec<T>,
    pub coeffs: Vec<DVector<T>>,
}

impl<T: Real> ChebBackward<T> {
    pub fn edge_potential(&self) -> Result<ChebPotential<T>> {
        ChebPotential::from_coeffs(self.coeffs[0].clone())
    }
}

impl<T: Real> WrightFisherEdge<T> {
    /// Grid step bounded by `1e-2` and by RK4 stability on the generator.
    pub fn new(beta1: f64, beta2: f64, degree: usize, tau: T) -> Result<Self> {
        let generator = generator_matrix::<T>(beta1, beta2, degree)?;
        let stiff = (0..=degree).map(|i| to_f64(generator[(i, i)]).abs()).fold(0.0, f64::max);
        let t = to_f64(tau);
        let steps = ((t / 1e-2).ceil() as usize).max((t * stiff / 2.0).ceil() as usize).max(2);
        Self::with_steps(beta1, beta2, degree, tau, steps)
    }

    pub fn with_steps(beta1: f64, beta2: f64, degree: usize, tau: T, steps: usize) -> Result<Self> {
        if !(tau > T::zero()) || !is_finite(tau) {
            return Err(Error::Validation(format!("edge duration {} is not positive", to_f64(tau))));
        }
        if steps < 2 {
            return Err(Error::Validation("continuous edges need at least 2 grid steps".into()));
        }
        let generator = generator_matrix::<T>(beta1, beta2, degree)?;
        Ok(Self { beta1, beta2, degree, tau, steps, generator })
    }

    pub fn dt(&self) -> T {
        self.tau / lit::<T>(self.steps as f64)
    }

    /// RK4 backward integration of `dλ/du = -Q λ`.
    pub fn pullback(&self, terminal: &ChebPotential<T>) -> Result<ChebBackward<T>> {
        if terminal.degree() != self.degree {
            return Err(Error::Dimension(format!(
                "terminal potential of degree {} for an edge of degree {}",
                terminal.degree(),
                self.degree
            )));
        }
        let m = self.steps;
        let dt = self.dt();
        let grid: Vec<T> = (0..=m).map(|i| self.tau * lit::<T>(i as f64 / m as f64)).collect();
        let mut coeffs = vec![DVector::zeros(self.degree + 1); m + 1];
        coeffs[m] = terminal.coeffs.clone();
        let q = &self.generator;
        let half = lit::<T>(0.5);
        let two = lit::<T>(2.0);
        for i in (0..m).rev() {
            // stepping backwards in u: dλ/d(-u) = Qλ
            let y = &coeffs[i + 1];
            let k1 = q * y;
            let k2 = q * (y + &k1 * (dt * half));
            let k3 = q * (y + &k2 * (dt * half));
            let k4 = q * (y + &k3 * dt);
            let next = y + (k1 + k2 * two + k3 * two + k4) * (dt / lit::<T>(6.0));
            if next.iter().any(|v| !is_finite(*v)) {
                return Err(Error::numeric(
                    "Chebyshev backward filter",
                    format!("coefficients overflowed at u = {:.6} (K = {})", to_f64(grid[i]), self.degree),
                ));
            }
            coeffs[i] = next;
        }
        Ok(ChebBackward { grid, coeffs })
    }

    /// `λ(0) = exp(Q τ) λ(τ)`.
    pub fn pullback_expm(&self, terminal: &ChebPotential<T>) -> Result<ChebPotential<T>> {
        ChebPotential::from_coeffs(expm(&(&self.generator * self.tau))? * &terminal.coeffs)
    }

    /// Guided Euler–Maruyama with drift `b + a ∂_x log g`; returns the path.
    pub fn guided_simulate(&self, bw: &ChebBackward<T>, x0: T, rng: &mut dyn RngCore) -> Result<Vec<T>> {
        let z: Vec<T> = (0..self.steps)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                lit::<T>(v)
            })
            .collect();
        self.guided_from_innovations(bw, x0, &z)
    }

    pub fn guided_from_innovations(&self, bw: &ChebBackward<T>, x0: T, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.steps {
            return Err(Error::Dimension(format!("{} innovations for {} steps", z.len(), self.steps)));
        }
        let eps = lit::<T>(BOUNDARY_CLAMP);
        let lo = eps;
        let hi = T::one() - eps;
        let dt = self.dt();
        let sq = dt.sqrt();
        let b1 = lit::<T>(self.beta1);
        let b2 = lit::<T>(self.beta2);
        let mut x = x0.max(lo).min(hi);
        let mut path = Vec::with_capacity(self.steps + 1);
        path.push(x);
        for (i, zi) in z.iter().enumerate() {
            let c = &bw.coeffs[i];
            let t = x + x - T::one();
            let g = clenshaw(c, t);
            if !(g > T::zero()) {
                return Err(Error::Sampling(format!(
                    "Chebyshev potential is not positive ({:.3e}) at x = {:.6}, u = {:.6}",
                    to_f64(g),
                    to_f64(x),
                    to_f64(bw.grid[i])
                )));
            }
            let dg = clenshaw(&derivative_coeffs(c), t);
            let a = x * (T::one() - x);
            let drift = b1 * (T::one() - x) + b2 * x + a * dg / g;
            x = (x + drift * dt + a.sqrt() * sq * *zi).max(lo).min(hi);
            path.push(x);
        }
        Ok(path)
    }

    /// Plain (unguided) Euler–Maruyama of the forward diffusion.
    pub fn forward_simulate(&self, x0: T, rng: &mut dyn RngCore) -> T {
        let eps = lit::<T>(BOUNDARY_CLAMP);
        let dt = self.dt();
        let sq = dt.sqrt();
        let mut x = x0;
        for _ in 0..self.steps {
            let v: f64 = StandardNormal.sample(rng);
            let a = x * (T::one() - x);
            let drift = lit::<T>(self.beta1) * (T::one() - x) + lit::<T>(self.beta2) * x;
            x = (x + drift * dt + a.sqrt() * sq * lit::<T>(v)).max(eps).min(T::one() - eps);
        }
        x
    }
}

/// Zero: in the exact-projection regime the generator maps the potential
/// family into itself, so the guided process has no weight.
pub fn wf_log_weight<T: Real>() -> T {
    T::zero()
}

/// Leaf weight for a binomial sample; zero whenever `K >= n`.
pub fn binomial_leaf_log_weight<T: Real>(n: usize, v: usize, g_edge: &ChebPotential<T>, x: T) -> Result<T> {
    if g_edge.degree() >= n {
        return Ok(T::zero());
    }
    let num = binomial_likelihood(n, v, to_f64(x)).ln();
    Ok(lit::<T>(num) - g_edge.log_eval(&x)?)
}
