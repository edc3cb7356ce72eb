//! Continuous edges carrying diffusions, guided by a linear auxiliary SDE.
//!
//! The backward messages solve the Riccati-type system for `(c, F, H)`,
//! exactly through Gaussian transitions when the auxiliary coefficients are
//! constant, and with RK4 otherwise. Guided paths use Euler–Maruyama on the
//! same grid so that innovations can be reused by path-space proposals.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::gaussian::{standard_normal_vec, GaussPotential};
use crate::linalg::{expm, symmetrize};
use crate::scalar::{is_finite, lit, to_f64, Real};

/// Backward solutions with `‖H‖` beyond this are reported as blow-up.
pub const BLOWUP_NORM: f64 = 1e12;

/// Default upper bound on the grid step.
pub const DEFAULT_MAX_STEP: f64 = 1e-2;

/// Largest `Δu (2‖B̃‖ + ‖ã‖‖H‖)` taken by one RK4 substep.
pub const STIFFNESS_PER_STEP: f64 = 0.5;
const MAX_SUBSTEPS: usize = 100_000;

pub type DriftFn<T> = Arc<dyn Fn(T, &DVector<T>) -> DVector<T> + Send + Sync>;
pub type DispersionFn<T> = Arc<dyn Fn(T, &DVector<T>) -> DMatrix<T> + Send + Sync>;

#[derive(Clone)]
pub enum Drift<T: Real> {
    /// `Bx + β`.
    Linear { b: DMatrix<T>, beta: DVector<T> },
    /// Componentwise `tanh(Bx + β)`.
    TanhLinear { b: DMatrix<T>, beta: DVector<T> },
    Custom(DriftFn<T>),
}

impl<T: Real> Drift<T> {
    pub fn eval(&self, u: T, x: &DVector<T>) -> DVector<T> {
        match self {
            Drift::Linear { b, beta } => b * x + beta,
            Drift::TanhLinear { b, beta } => (b * x + beta).map(|v| v.tanh()),
            Drift::Custom(f) => f(u, x),
        }
    }
}

#[derive(Clone)]
pub enum Dispersion<T: Real> {
    Constant(DMatrix<T>),
    Custom(DispersionFn<T>),
}

impl<T: Real> Dispersion<T> {
    pub fn eval(&self, u: T, x: &DVector<T>) -> DMatrix<T> {
        match self {
            Dispersion::Constant(s) => s.clone(),
            Dispersion::Custom(f) => f(u, x),
        }
    }
}

#[derive(Clone)]
pub enum TimeMatrix<T: Real> {
    Constant(DMatrix<T>),
    Function(Arc<dyn Fn(T) -> DMatrix<T> + Send + Sync>),
}

impl<T: Real> TimeMatrix<T> {
    pub fn at(&self, u: T) -> DMatrix<T> {
        match self {
            TimeMatrix::Constant(m) => m.clone(),
            TimeMatrix::Function(f) => f(u),
        }
    }
}

#[derive(Clone)]
pub enum TimeVector<T: Real> {
    Constant(DVector<T>),
    Function(Arc<dyn Fn(T) -> DVector<T> + Send + Sync>),
}

impl<T: Real> TimeVector<T> {
    pub fn at(&self, u: T) -> DVector<T> {
        match self {
            TimeVector::Constant(v) => v.clone(),
            TimeVector::Function(f) => f(u),
        }
    }
}

/// `dX = b(u, X) du + σ(u, X) dW`.
#[derive(Clone)]
pub struct SdeSpec<T: Real> {
    pub drift: Drift<T>,
    pub dispersion: Dispersion<T>,
}

/// `dX̃ = (B(u) X̃ + β(u)) du + σ̃(u) dW`.
#[derive(Clone)]
pub struct LinearAux<T: Real> {
    pub b: TimeMatrix<T>,
    pub beta: TimeVector<T>,
    pub sigma: TimeMatrix<T>,
}

impl<T: Real> LinearAux<T> {
    pub fn constant(b: DMatrix<T>, beta: DVector<T>, sigma: DMatrix<T>) -> Self {
        Self {
            b: TimeMatrix::Constant(b),
            beta: TimeVector::Constant(beta),
            sigma: TimeMatrix::Constant(sigma),
        }
    }

    fn coefficients(&self, u: T) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
        let s = self.sigma.at(u);
        (self.b.at(u), self.beta.at(u), &s * s.transpose())
    }
}

/// `X̃_{u+h} | X̃_u = x  ~  N(Φx + m, Σ)`.
struct AuxStep<T: Real> {
    phi: DMatrix<T>,
    mean: DVector<T>,
    sigma: DMatrix<T>,
}

impl<T: Real> AuxStep<T> {
    /// `(c, F, H)` at `u` from their values at `u + h`, by integrating the
    /// potential against the Gaussian transition.
    fn apply(&self, c: T, f: &DVector<T>, h: &DMatrix<T>) -> Result<OdeState<T>> {
        let half = lit::<T>(0.5);
        let d = f.len();
        let s = DMatrix::identity(d, d) + h * &self.sigma;
        let lu = s.clone().lu();
        let k_h = lu.solve(h).ok_or_else(|| Error::numeric("backward filter step", "I + HΣ is singular"))?;
        let k_f = lu.solve(f).ok_or_else(|| Error::numeric("backward filter step", "I + HΣ is singular"))?;
        let det = lu.determinant();
        if !(det > T::zero()) {
            return Err(Error::numeric("backward filter step", "det(I + HΣ) is not positive"));
        }
        let h_bar = symmetrize(&k_h);
        let r = &k_f - &h_bar * &self.mean;
        let c_new = c - det.ln() * half + f.dot(&(&self.sigma * &k_f)) * half + k_f.dot(&self.mean)
            - self.mean.dot(&(&h_bar * &self.mean)) * half;
        let pt = self.phi.transpose();
        Ok((c_new, &pt * r, symmetrize(&(&pt * h_bar * &self.phi))))
    }
}

#[derive(Clone)]
pub struct SdeEdge<T: Real> {
    pub sde: SdeSpec<T>,
    pub aux: LinearAux<T>,
    pub tau: T,
    pub steps: usize,
}

impl<T: Real> fmt::Debug for SdeEdge<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeEdge")
            .field("tau", &to_f64(self.tau))
            .field("steps", &self.steps)
            .field("exact", &self.is_exact())
            .finish()
    }
}

/// Backward solution on the grid `u_k = k τ / M`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardOde<T: Real> {
    pub grid: Vec<T>,
    pub c: Vec<T>,
    pub f: Vec<DVector<T>>,
    pub h: Vec<DMatrix<T>>,
}

impl<T: Real> BackwardOde<T> {
    pub fn potential_at(&self, k: usize) -> GaussPotential<T> {
        GaussPotential {
            c: self.c[k],
            f: self.f[k].clone(),
            h: self.h[k].clone(),
        }
    }

    /// The edge message `(c(0), F(0), H(0))`.
    pub fn edge_potential(&self) -> GaussPotential<T> {
        self.potential_at(0)
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedPath<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<DVector<T>>,
    /// Standard-normal innovations; the Wiener increment on step `k` is
    /// `sqrt(Δu) * innovations[k]`.
    pub innovations: Vec<DVector<T>>,
}

impl<T: Real> GuidedPath<T> {
    pub fn end(&self) -> &DVector<T> {
        self.states.last().expect("paths have at least one state")
    }
}

type OdeState<T> = (T, DVector<T>, DMatrix<T>);

impl<T: Real> SdeEdge<T> {
    /// Edge with a grid step of at most [`DEFAULT_MAX_STEP`].
    pub fn new(sde: SdeSpec<T>, aux: LinearAux<T>, tau: T) -> Result<Self> {
        let steps = ((to_f64(tau) / DEFAULT_MAX_STEP).ceil() as usize).max(2);
        Self::with_steps(sde, aux, tau, steps)
    }

    pub fn with_steps(sde: SdeSpec<T>, aux: LinearAux<T>, tau: T, steps: usize) -> Result<Self> {
        if !(tau > T::zero()) || !is_finite(tau) {
            return Err(Error::Validation(format!(
                "continuous edge duration must be positive, got {}",
                to_f64(tau)
            )));
        }
        if steps < 2 {
            return Err(Error::Validation("continuous edges need at least 2 grid steps".into()));
        }
        Ok(Self { sde, aux, tau, steps })
    }

    pub fn dt(&self) -> T {
        self.tau / lit::<T>(self.steps as f64)
    }

    pub fn grid(&self) -> Vec<T> {
        (0..=self.steps)
            .map(|k| self.tau * lit::<T>(k as f64) / lit::<T>(self.steps as f64))
            .collect()
    }

    /// True when the forward SDE is, term for term, the auxiliary one.
    pub fn is_exact(&self) -> bool {
        match (&self.sde.drift, &self.sde.dispersion, &self.aux) {
            (
                Drift::Linear { b, beta },
                Dispersion::Constant(s),
                LinearAux {
                    b: TimeMatrix::Constant(bt),
                    beta: TimeVector::Constant(betat),
                    sigma: TimeMatrix::Constant(st),
                },
            ) => b == bt && beta == betat && s == st,
            _ => false,
        }
    }

    fn rhs(&self, u: T, (_, f, h): &OdeState<T>) -> OdeState<T> {
        let half = lit::<T>(0.5);
        let (b, beta, a) = self.aux.coefficients(u);
        let ha = h * &a;
        let dh = -(b.transpose() * h) - h * &b + &ha * h;
        let df = -(b.transpose() * f) + &ha * f + h * &beta;
        // sign fixed by ∂_u g + L̃g = 0 for g = exp(c + F'x - x'Hx/2)
        let dc = ha.trace() * half - beta.dot(f) - f.dot(&(&a * f)) * half;
        (dc, df, dh)
    }

    /// Transition of the auxiliary over one grid step, when its coefficients
    /// do not depend on time.
    fn exact_step(&self) -> Result<Option<AuxStep<T>>> {
        let (b, beta, a) = match &self.aux {
            LinearAux { b: TimeMatrix::Constant(b), beta: TimeVector::Constant(beta), sigma: TimeMatrix::Constant(s) } => {
                (b, beta, s * s.transpose())
            }
            _ => return Ok(None),
        };
        let d = b.nrows();
        let h = self.dt();
        // Van Loan: expm([[-B, ã], [0, B']] h) = [[·, G12], [0, G22]], Φ = G22', Σ = Φ G12
        let mut block = DMatrix::zeros(2 * d, 2 * d);
        block.view_mut((0, 0), (d, d)).copy_from(&(-b * h));
        block.view_mut((0, d), (d, d)).copy_from(&(&a * h));
        block.view_mut((d, d), (d, d)).copy_from(&(b.transpose() * h));
        let g = expm(&block)?;
        let phi = g.view((d, d), (d, d)).transpose();
        let sigma = symmetrize(&(&phi * g.view((0, d), (d, d))));
        let mut drift = DMatrix::zeros(d + 1, d + 1);
        drift.view_mut((0, 0), (d, d)).copy_from(&(b * h));
        drift.view_mut((0, d), (d, 1)).copy_from(&(beta * h));
        let mean = expm(&drift)?.view((0, d), (d, 1)).column(0).into_owned();
        Ok(Some(AuxStep { phi, mean, sigma }))
    }

    /// Integrate the backward equations from the terminal potential at `τ`.
    pub fn solve_backward(&self, terminal: &GaussPotential<T>) -> Result<BackwardOde<T>> {
        let d = terminal.dim();
        let (b0, beta0, a0) = self.aux.coefficients(T::zero());
        if b0.nrows() != d || b0.ncols() != d || beta0.len() != d || a0.nrows() != d {
            return Err(Error::Dimension(format!(
                "auxiliary process of dimension {} against terminal potential of dimension {d}",
                beta0.len()
            )));
        }
        let grid = self.grid();
        let m = self.steps;
        let dt = self.dt();
        let half = lit::<T>(0.5);
        let sixth = lit::<T>(1.0 / 6.0);
        let mut c = vec![T::zero(); m + 1];
        let mut f = vec![DVector::zeros(d); m + 1];
        let mut h = vec![DMatrix::zeros(d, d); m + 1];
        c[m] = terminal.c;
        f[m] = terminal.f.clone();
        h[m] = symmetrize(&terminal.h);
        if let Some(step) = self.exact_step()? {
            for k in (0..m).rev() {
                (c[k], f[k], h[k]) = step.apply(c[k + 1], &f[k + 1], &h[k + 1])?;
                let norm = to_f64(h[k].norm());
                if !(norm <= BLOWUP_NORM) || !is_finite(c[k]) || f[k].iter().any(|v| !is_finite(*v)) {
                    return Err(Error::numeric(
                        "backward filter ODE",
                        format!("solution blew up at u = {:.6} (‖H‖ = {norm:.3e})", to_f64(grid[k])),
                    ));
                }
            }
            return Ok(BackwardOde { grid, c, f, h });
        }
        let axpy = |s: &OdeState<T>, k: &OdeState<T>, w: T| -> OdeState<T> {
            (s.0 + k.0 * w, &s.1 + &k.1 * w, &s.2 + &k.2 * w)
        };
        for k in (0..m).rev() {
            let mut y: OdeState<T> = (c[k + 1], f[k + 1].clone(), h[k + 1].clone());
            // substeps keep RK4 inside its stability region when H is large
            let (b1, _, a1) = self.aux.coefficients(grid[k + 1]);
            let stiff = to_f64(dt) * (2.0 * to_f64(b1.norm()) + to_f64(a1.norm()) * to_f64(y.2.norm()));
            let sub = ((stiff / STIFFNESS_PER_STEP).ceil() as usize).clamp(1, MAX_SUBSTEPS);
            let step = -dt / lit::<T>(sub as f64);
            let mut u = grid[k + 1];
            for _ in 0..sub {
                let k1 = self.rhs(u, &y);
                let k2 = self.rhs(u + step * half, &axpy(&y, &k1, step * half));
                let k3 = self.rhs(u + step * half, &axpy(&y, &k2, step * half));
                let k4 = self.rhs(u + step, &axpy(&y, &k3, step));
                let w = step * sixth;
                let two = lit::<T>(2.0);
                y = (
                    y.0 + (k1.0 + k2.0 * two + k3.0 * two + k4.0) * w,
                    &y.1 + (&k1.1 + &k2.1 * two + &k3.1 * two + &k4.1) * w,
                    symmetrize(&(&y.2 + (&k1.2 + &k2.2 * two + &k3.2 * two + &k4.2) * w)),
                );
                u += step;
            }
            (c[k], f[k], h[k]) = y;
            let norm = to_f64(h[k].norm());
            if !(norm <= BLOWUP_NORM) || !is_finite(c[k]) || f[k].iter().any(|v| !is_finite(*v)) {
                return Err(Error::numeric(
                    "backward filter ODE",
                    format!("solution blew up at u = {:.6} (‖H‖ = {norm:.3e})", to_f64(grid[k])),
                ));
            }
        }
        Ok(BackwardOde { grid, c, f, h })
    }

    /// Guided Euler–Maruyama path as a deterministic function of innovations.
    pub fn guided_from_innovations(
        &self,
        ode: &BackwardOde<T>,
        x0: &DVector<T>,
        innovations: Vec<DVector<T>>,
    ) -> Result<GuidedPath<T>> {
        if innovations.len() != self.steps || ode.steps() != self.steps {
            return Err(Error::Dimension(format!(
                "{} innovations / {} ODE steps for a grid of {} steps",
                innovations.len(),
                ode.steps(),
                self.steps
            )));
        }
        let dt = self.dt();
        let sq = dt.sqrt();
        let mut x = x0.clone();
        let mut states = Vec::with_capacity(self.steps + 1);
        states.push(x.clone());
        for k in 0..self.steps {
            let u = ode.grid[k];
            let s = self.sde.dispersion.eval(u, &x);
            let a = &s * s.transpose();
            let r = &ode.f[k] - &ode.h[k] * &x;
            let drift = self.sde.drift.eval(u, &x) + a * r;
            if innovations[k].len() != s.ncols() {
                return Err(Error::Dimension(format!(
                    "innovation of length {} for dispersion with {} columns",
                    innovations[k].len(),
                    s.ncols()
                )));
            }
            x = &x + drift * dt + s * (&innovations[k] * sq);
            if x.iter().any(|v| !is_finite(*v)) {
                return Err(Error::numeric(
                    "guided SDE simulation",
                    format!("state became non-finite at u = {:.6}", to_f64(ode.grid[k + 1])),
                ));
            }
            states.push(x.clone());
        }
        Ok(GuidedPath { times: ode.grid.clone(), states, innovations })
    }

    /// Number of driving Brownian components.
    pub fn noise_dim(&self, x0: &DVector<T>) -> usize {
        self.sde.dispersion.eval(T::zero(), x0).ncols()
    }

    pub fn draw_innovations(&self, x0: &DVector<T>, rng: &mut dyn RngCore) -> Vec<DVector<T>> {
        let m = self.noise_dim(x0);
        (0..self.steps).map(|_| standard_normal_vec(m, rng)).collect()
    }

    pub fn guided_simulate(
        &self,
        ode: &BackwardOde<T>,
        x0: &DVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<GuidedPath<T>> {
        let z = self.draw_innovations(x0, rng);
        self.guided_from_innovations(ode, x0, z)
    }

    /// Innovations reproducing a given grid path under `ode`; needs an
    /// invertible dispersion.
    pub fn innovations_from_states(&self, ode: &BackwardOde<T>, states: &[DVector<T>]) -> Result<Vec<DVector<T>>> {
        if states.len() != self.steps + 1 || ode.steps() != self.steps {
            return Err(Error::Dimension(format!(
                "{} path states / {} ODE steps for a grid of {} steps",
                states.len(),
                ode.steps(),
                self.steps
            )));
        }
        let dt = self.dt();
        let sq = dt.sqrt();
        let mut out = Vec::with_capacity(self.steps);
        for k in 0..self.steps {
            let u = ode.grid[k];
            let x = &states[k];
            let s = self.sde.dispersion.eval(u, x);
            let a = &s * s.transpose();
            let r = &ode.f[k] - &ode.h[k] * x;
            let drift = self.sde.drift.eval(u, x) + a * r;
            let inc = (&states[k + 1] - x - drift * dt) / sq;
            let z = s.clone().lu().solve(&inc).filter(|_| s.is_square()).ok_or_else(|| {
                Error::Unsupported("path inversion needs a square invertible dispersion".into())
            })?;
            out.push(z);
        }
        Ok(out)
    }

    /// Left-endpoint Riemann sum of `(L - L̃) g / g` along the path.
    pub fn log_weight(&self, ode: &BackwardOde<T>, path: &GuidedPath<T>) -> Result<T> {
        if self.is_exact() {
            return Ok(T::zero());
        }
        let half = lit::<T>(0.5);
        let dt = self.dt();
        let mut total = T::zero();
        for k in 0..self.steps {
            let u = ode.grid[k];
            let x = &path.states[k];
            let (bt, betat, at) = self.aux.coefficients(u);
            let s = self.sde.dispersion.eval(u, x);
            let a = &s * s.transpose();
            let db = self.sde.drift.eval(u, x) - (bt * x + betat);
            let da = a - at;
            let h = &ode.h[k];
            let r = &ode.f[k] - h * x;
            let shape = &r * r.transpose() - h;
            let integrand = db.dot(&r) + da.component_mul(&shape).sum() * half;
            if !is_finite(integrand) {
                return Err(Error::numeric(
                    "SDE path weight",
                    format!("non-finite integrand at u = {:.6}", to_f64(u)),
                ));
            }
            total += integrand * dt;
        }
        Ok(total)
    }
}
