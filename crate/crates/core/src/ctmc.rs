//! Continuous edges carrying finite-state continuous-time Markov chains.
//!
//! The auxiliary chain with rate matrix `Q̃` gives the space-time potential
//! `g(u, ·) = exp(Q̃ (τ - u)) g_τ`. Guided paths are simulated by thinning
//! under the time-inhomogeneous rates `q°_u(x, y) = q(x, y) g(u, y) / g(u, x)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::finite::{sample_categorical, VecPotential};
use crate::linalg::{expm, expm_action_uniformized};
use crate::scalar::{is_finite, lit, neg_inf, to_f64, Real};

/// Uniform time nodes used for thinning bounds and cached potentials.
pub const THINNING_GRID: usize = 64;
/// Safety factor applied to sampled guided exit rates.
pub const THINNING_SAFETY: f64 = 1.2;
/// Number of geometric refinements of the last grid interval towards `τ`.
pub const TERMINAL_REFINEMENTS: i32 = 40;
/// Above this state-space size the pullback uses uniformization.
pub const DENSE_EXPM_MAX_STATES: usize = 1000;

const GAUSS_LEGENDRE_8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
];

pub fn validate_rate_matrix<T: Real>(q: &DMatrix<T>, what: &str) -> Result<()> {
    if !q.is_square() {
        return Err(Error::Dimension(format!("{what}: rate matrix is {}x{}", q.nrows(), q.ncols())));
    }
    for i in 0..q.nrows() {
        let mut s = 0.0;
        let mut scale = 0.0f64;
        for j in 0..q.ncols() {
            let v = to_f64(q[(i, j)]);
            if !v.is_finite() || (i != j && v < 0.0) {
                return Err(Error::Validation(format!("{what}: entry ({i},{j}) = {v}")));
            }
            s += v;
            scale = scale.max(v.abs());
        }
        if s.abs() > 1e-10 * scale.max(1.0) {
            return Err(Error::Validation(format!("{what}: row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Auxiliary rate matrix, optionally block diagonal.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxRates<T: Real> {
    Dense(DMatrix<T>),
    BlockDiagonal(Vec<DMatrix<T>>),
}

impl<T: Real> AuxRates<T> {
    pub fn states(&self) -> usize {
        match self {
            AuxRates::Dense(q) => q.nrows(),
            AuxRates::BlockDiagonal(bs) => bs.iter().map(|b| b.nrows()).sum(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match self {
            AuxRates::Dense(q) => q.clone(),
            AuxRates::BlockDiagonal(bs) => {
                let n = self.states();
                let mut out = DMatrix::zeros(n, n);
                let mut off = 0;
                for b in bs {
                    out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
                    off += b.nrows();
                }
                out
            }
        }
    }

    /// `exp(Q̃ t) v` exactly via dense Padé expm (per block when block diagonal).
    pub fn propagate(&self, t: T, v: &DVector<T>) -> Result<DVector<T>> {
        match self {
            AuxRates::Dense(q) => {
                if q.nrows() <= DENSE_EXPM_MAX_STATES {
                    Ok(expm(&(q * t))? * v)
                } else {
                    Ok(expm_action_uniformized(q, t, v))
                }
            }
            AuxRates::BlockDiagonal(bs) => {
                let mut out = DVector::zeros(v.len());
                let mut off = 0;
                for b in bs {
                    let n = b.nrows();
                    let part = expm(&(b * t))? * v.rows(off, n);
                    out.rows_mut(off, n).copy_from(&part);
                    off += n;
                }
                Ok(out)
            }
        }
    }

    /// Cheap `exp(Q̃ t) v` for short horizons.
    fn propagate_short(&self, t: T, v: &DVector<T>) -> DVector<T> {
        match self {
            AuxRates::Dense(q) => expm_action_uniformized(q, t, v),
            AuxRates::BlockDiagonal(bs) => {
                let mut out = DVector::zeros(v.len());
                let mut off = 0;
                for b in bs {
                    let n = b.nrows();
                    let part = expm_action_uniformized(b, t, &v.rows(off, n).into_owned());
                    out.rows_mut(off, n).copy_from(&part);
                    off += n;
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtmcEdge<T: Real> {
    pub q: DMatrix<T>,
    pub aux: AuxRates<T>,
    pub tau: T,
    aux_dense: DMatrix<T>,
}

/// `g(u, ·)` cached at the thinning grid with a common log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CtmcPotential<T: Real> {
    pub grid: Vec<T>,
    /// Linear-scale values at each grid node, relative to `exp(log_scale)`.
    pub values: Vec<DVector<T>>,
    pub log_scale: T,
    /// Dominating guided exit rates per grid interval and state.
    pub bounds: Vec<Vec<f64>>,
    /// Weight integrand integrated over each whole grid interval, per state
    /// (NaN where the potential vanishes; empty for exact edges).
    pub interval_integrals: Vec<Vec<f64>>,
}

impl<T: Real> CtmcPotential<T> {
    /// The edge message `g(0, ·)` in log form.
    pub fn edge_potential(&self) -> VecPotential<T> {
        VecPotential::from_log(self.values[0].map(|v| if v > T::zero() { v.ln() + self.log_scale } else { neg_inf() }))
    }
}

/// Jump path on `[0, τ]`: `states[0]` is the start, `states[i]` the state
/// after the jump at `jump_times[i - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtmcPath<T: Real> {
    pub jump_times: Vec<T>,
    pub states: Vec<usize>,
    /// Proposals whose guided rate exceeded the thinning bound.
    pub bound_violations: usize,
}

impl<T: Real> CtmcPath<T> {
    pub fn end(&self) -> usize {
        *self.states.last().expect("paths have a start state")
    }
}

impl<T: Real> CtmcEdge<T> {
    pub fn new(q: DMatrix<T>, aux: AuxRates<T>, tau: T) -> Result<Self> {
        validate_rate_matrix(&q, "forward rate matrix")?;
        let aux_dense = aux.to_dense();
        validate_rate_matrix(&aux_dense, "auxiliary rate matrix")?;
        if aux_dense.nrows() != q.nrows() {
            return Err(Error::Dimension(format!(
                "forward chain has {} states, auxiliary {}",
                q.nrows(),
                aux_dense.nrows()
            )));
        }
        if !(tau > T::zero()) || !is_finite(tau) {
            return Err(Error::Validation(format!("edge duration {} is not positive", to_f64(tau))));
        }
        Ok(Self { q, aux, tau, aux_dense })
    }

    pub fn exact(q: DMatrix<T>, tau: T) -> Result<Self> {
        Self::new(q.clone(), AuxRates::Dense(q), tau)
    }

    pub fn states(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_exact(&self) -> bool {
        self.q == self.aux_dense
    }

    /// Grid of [`THINNING_GRID`] uniform intervals with the last one
    /// refined geometrically towards `τ`.
    pub fn time_grid(&self) -> Vec<T> {
        let n = THINNING_GRID;
        let mut grid: Vec<T> = (0..n)
            .map(|k| self.tau * lit::<T>(k as f64 / n as f64))
            .collect();
        let h = self.tau / lit::<T>(n as f64);
        for m in 1..=TERMINAL_REFINEMENTS {
            grid.push(self.tau - h * lit::<T>(0.5f64.powi(m)));
        }
        grid.push(self.tau);
        grid
    }

    pub fn pullback(&self, terminal: &VecPotential<T>) -> Result<CtmcPotential<T>> {
        if terminal.len() != self.states() {
            return Err(Error::Dimension(format!(
                "terminal potential of length {} for {} states",
                terminal.len(),
                self.states()
            )));
        }
        let log_scale = terminal.log.iter().copied().fold(neg_inf::<T>(), |a, b| a.max(b));
        if !is_finite(log_scale) {
            return Err(Error::Validation("terminal potential vanishes identically".into()));
        }
        let g_t = terminal.log.map(|l| (l - log_scale).exp());
        let grid = self.time_grid();
        let values = grid
            .iter()
            .map(|&u| {
                if u == self.tau {
                    Ok(g_t.clone())
                } else {
                    self.aux.propagate(self.tau - u, &g_t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pot = CtmcPotential { grid, values, log_scale, bounds: Vec::new(), interval_integrals: Vec::new() };
        pot.bounds = self.thinning_bounds(&pot);
        if !self.is_exact() {
            pot.interval_integrals = (0..pot.grid.len() - 1)
                .map(|i| {
                    let (a, b) = (to_f64(pot.grid[i]), to_f64(pot.grid[i + 1]));
                    (0..self.states()).map(|x| self.piece_integral(&pot, a, b, x).unwrap_or(f64::NAN)).collect()
                })
                .collect();
        }
        Ok(pot)
    }

    /// `g(u, ·)` (relative to the cached scale), right-continuous in `u`.
    pub fn potential_at(&self, pot: &CtmcPotential<T>, u: T) -> DVector<T> {
        let idx = pot.grid.partition_point(|&t| t < u);
        let idx = idx.min(pot.grid.len() - 1);
        let t = pot.grid[idx];
        if t == u {
            return pot.values[idx].clone();
        }
        self.aux.propagate_short(t - u, &pot.values[idx]).map(|v| v.max(T::zero()))
    }

    /// Off-diagonal guided rates from `x` at time `u`; the diagonal entry is
    /// minus their sum.
    pub fn guided_rates(&self, pot: &CtmcPotential<T>, u: T, x: usize) -> Result<Vec<T>> {
        let g = self.potential_at(pot, u);
        self.guided_rates_with(&g, x, u)
    }

    fn guided_rates_with(&self, g: &DVector<T>, x: usize, u: T) -> Result<Vec<T>> {
        let gx = g[x];
        if !(gx > T::zero()) {
            return Err(Error::Sampling(format!(
                "potential vanishes at state {x} at time {:.6}",
                to_f64(u)
            )));
        }
        let mut rates: Vec<T> = (0..self.states())
            .map(|y| if y == x { T::zero() } else { self.q[(x, y)] * g[y] / gx })
            .collect();
        let total = rates.iter().fold(T::zero(), |a, &b| a + b);
        rates[x] = -total;
        Ok(rates)
    }

    fn exit_rate(&self, pot: &CtmcPotential<T>, u: T, x: usize) -> f64 {
        match self.guided_rates(pot, u, x) {
            Ok(r) => -to_f64(r[x]),
            Err(_) => f64::INFINITY,
        }
    }

    /// Piecewise-constant dominating rates per grid interval and state.
    fn thinning_bounds(&self, pot: &CtmcPotential<T>) -> Vec<Vec<f64>> {
        let half = lit::<T>(0.5);
        (0..pot.grid.len() - 1)
            .map(|i| {
                let (a, b) = (pot.grid[i], pot.grid[i + 1]);
                (0..self.states())
                    .map(|x| {
                        let samples = [
                            self.exit_rate(pot, a, x),
                            self.exit_rate(pot, (a + b) * half, x),
                            self.exit_rate(pot, b, x),
                        ];
                        let finite = samples.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
                        THINNING_SAFETY * finite
                    })
                    .collect()
            })
            .collect()
    }

    pub fn guided_simulate(&self, pot: &CtmcPotential<T>, x0: usize, rng: &mut dyn RngCore) -> Result<CtmcPath<T>> {
        if x0 >= self.states() {
            return Err(Error::Validation(format!("start state {x0} outside 0..{}", self.states())));
        }
        let bounds = if pot.bounds.is_empty() { self.thinning_bounds(pot) } else { pot.bounds.clone() };
        let mut x = x0;
        let mut path = CtmcPath { jump_times: Vec::new(), states: vec![x0], bound_violations: 0 };
        self.guided_rates(pot, T::zero(), x0)?;
        for (i, row) in bounds.iter().enumerate() {
            let end = to_f64(pot.grid[i + 1]);
            let mut u = to_f64(pot.grid[i]);
            loop {
                let bound = row[x];
                if !(bound > 0.0) {
                    break;
                }
                let e: f64 = -(1.0 - rng.random::<f64>()).ln() / bound;
                u += e;
                if u >= end {
                    break;
                }
                let rates = self.guided_rates(pot, lit::<T>(u), x)?;
                let total = -to_f64(rates[x]);
                if total > bound {
                    path.bound_violations += 1;
                }
                if rng.random::<f64>() * bound < total {
                    let pmf: Vec<f64> = rates
                        .iter()
                        .enumerate()
                        .map(|(y, r)| if y == x { 0.0 } else { to_f64(*r) / total })
                        .collect();
                    x = sample_categorical(&pmf, rng);
                    path.jump_times.push(lit::<T>(u));
                    path.states.push(x);
                }
            }
        }
        Ok(path)
    }

    /// `∫_a^b Σ_y (q - q̃)(x, y) g(u, y) / g(u, x) du` by 8-point Gauss–Legendre.
    fn piece_integral(&self, pot: &CtmcPotential<T>, a: f64, b: f64, x: usize) -> Result<f64> {
        let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
        let mut total = 0.0;
        for (node, weight) in GAUSS_LEGENDRE_8 {
            let u = mid + half * node;
            let g = self.potential_at(pot, lit::<T>(u));
            let gx = to_f64(g[x]);
            if !(gx > 0.0) {
                return Err(Error::numeric("CTMC path weight", format!("potential vanishes at u = {u:.6}")));
            }
            let num: f64 = (0..self.states())
                .map(|y| to_f64(self.q[(x, y)] - self.aux_dense[(x, y)]) * to_f64(g[y]))
                .sum();
            total += weight * half * num / gx;
        }
        Ok(total)
    }

    /// `∫ Σ_y (q - q̃)(X_u, y) g(u, y) / g(u, X_u) du`, with 8-point
    /// Gauss–Legendre on every piece between jumps and grid nodes; pieces
    /// that are whole grid intervals use the cached integrals.
    pub fn log_weight(&self, pot: &CtmcPotential<T>, path: &CtmcPath<T>) -> Result<T> {
        if self.is_exact() {
            return Ok(T::zero());
        }
        let cached = pot.interval_integrals.len() + 1 == pot.grid.len();
        let jumps: Vec<f64> = path.jump_times.iter().map(|t| to_f64(*t)).collect();
        let mut total = 0.0;
        let mut j = 0;
        for i in 0..pot.grid.len() - 1 {
            let (a, b) = (to_f64(pot.grid[i]), to_f64(pot.grid[i + 1]));
            while j < jumps.len() && jumps[j] <= a {
                j += 1;
            }
            let first = j;
            let mut last = j;
            while last < jumps.len() && jumps[last] < b {
                last += 1;
            }
            if first == last {
                let x = path.states[first];
                let v = if cached { pot.interval_integrals[i][x] } else { f64::NAN };
                total += if v.is_nan() { self.piece_integral(pot, a, b, x)? } else { v };
                continue;
            }
            let mut lo = a;
            for k in first..=last {
                let hi = if k < last { jumps[k] } else { b };
                if hi > lo {
                    total += self.piece_integral(pot, lo, hi, path.states[k])?;
                }
                lo = hi;
            }
            j = last;
        }
        if !total.is_finite() {
            return Err(Error::numeric("CTMC path weight", "non-finite integral"));
        }
        Ok(lit(total))
    }
}
