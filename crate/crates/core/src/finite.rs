//! Finite-state chains and interacting particle systems.
//!
//! Potentials are stored as log-vectors so that hard zeros (`-inf`)
//! coming from exactly observed leaves propagate without underflow.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::potential::{GuidedKernel, Potential};
use crate::scalar::{is_finite, neg_inf, to_f64, Real};

/// Row sums of stochastic matrices must be within this distance of one
/// (widened to a few ulps for single precision).
pub const STOCHASTIC_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VecPotential<T: Real> {
    pub log: DVector<T>,
}

impl<T: Real> VecPotential<T> {
    pub fn from_log(log: DVector<T>) -> Self {
        Self { log }
    }

    pub fn from_values(values: &[T]) -> Result<Self> {
        let mut log = DVector::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v < T::zero() || !is_finite(v) {
                return Err(Error::Validation(format!("potential entry {i} is {}", to_f64(v))));
            }
            log[i] = if v == T::zero() { neg_inf() } else { v.ln() };
        }
        Ok(Self { log })
    }

    pub fn ones(r: usize) -> Self {
        Self { log: DVector::zeros(r) }
    }

    /// Unit vector `e_k` (zero-based state index).
    pub fn unit(r: usize, k: usize) -> Result<Self> {
        if k >= r {
            return Err(Error::Validation(format!("state {k} outside 0..{r}")));
        }
        let mut log = DVector::from_element(r, neg_inf());
        log[k] = T::zero();
        Ok(Self { log })
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn values(&self) -> Vec<T> {
        self.log.iter().map(|v| v.exp()).collect()
    }

    pub fn log_at(&self, k: usize) -> Result<T> {
        self.log
            .get(k)
            .copied()
            .ok_or_else(|| Error::Validation(format!("state {k} outside 0..{}", self.len())))
    }

    pub fn fuse_all(gs: &[Self]) -> Result<Self> {
        let first = gs
            .first()
            .ok_or_else(|| Error::Validation("fusion of an empty list".into()))?;
        let mut log = first.log.clone();
        for g in &gs[1..] {
            if g.len() != log.len() {
                return Err(Error::Dimension(format!(
                    "fusing vectors of lengths {} and {}",
                    log.len(),
                    g.len()
                )));
            }
            log += &g.log;
        }
        Ok(Self { log })
    }
}

impl<T: Real> Potential for VecPotential<T> {
    type State = usize;
    type Scalar = T;

    fn log_eval(&self, x: &usize) -> Result<T> {
        self.log_at(*x)
    }

    fn fuse(gs: &[Self]) -> Result<Self> {
        Self::fuse_all(gs)
    }
}

/// Nonzero pattern of a stochastic matrix, used for the sparse pullback path.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows<T: Real> {
    pub cols: usize,
    pub rows: Vec<Vec<(usize, T)>>,
}

impl<T: Real> SparseRows<T> {
    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != T::zero())
                    .map(|j| (j, m[(i, j)].ln()))
                    .collect()
            })
            .collect();
        Self { cols: m.ncols(), rows }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// `log (K g)` with `g` given in log-space; entries are stored as logs.
    pub fn log_matvec(&self, g: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| log_sum_exp(row.iter().map(|&(j, lk)| lk + g[j]))),
        )
    }
}

pub fn validate_stochastic<T: Real>(m: &DMatrix<T>, what: &str) -> Result<()> {
    let tol = STOCHASTIC_TOLERANCE.max(4.0 * to_f64(T::default_epsilon()) * m.ncols() as f64);
    for i in 0..m.nrows() {
        let mut s = 0.0;
        for j in 0..m.ncols() {
            let v = to_f64(m[(i, j)]);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{what}: entry ({i},{j}) = {v}")));
            }
            s += v;
        }
        if (s - 1.0).abs() > tol {
            return Err(Error::Validation(format!("{what}: row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `log sum_k row_k exp(g_k)` for a probability row in linear scale.
pub fn log_row_dot<T: Real>(row: &[T], g: &DVector<T>) -> T {
    log_sum_exp(
        row.iter()
            .zip(g.iter())
            .filter(|(p, _)| **p > T::zero())
            .map(|(p, lg)| p.ln() + *lg),
    )
}

/// Categorical draw with pmf proportional to `row_k exp(g_k)`.
pub fn sample_tilted_row<T: Real>(row: &[T], g: &DVector<T>, rng: &mut dyn RngCore) -> Result<usize> {
    let pmf = tilted_pmf(row, g)?;
    Ok(sample_categorical(&pmf, rng))
}

/// Normalized pmf proportional to `row_k exp(g_k)`.
pub fn tilted_pmf<T: Real>(row: &[T], g: &DVector<T>) -> Result<Vec<f64>> {
    if row.len() != g.len() {
        return Err(Error::Dimension(format!(
            "kernel row of length {} against potential of length {}",
            row.len(),
            g.len()
        )));
    }
    let logs: Vec<f64> = row
        .iter()
        .zip(g.iter())
        .map(|(p, lg)| {
            let p = to_f64(*p);
            if p > 0.0 {
                p.ln() + to_f64(*lg)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let norm = log_sum_exp(logs.iter().copied());
    if !norm.is_finite() {
        return Err(Error::Sampling(format!(
            "guided normalizer is {norm}; the potential vanishes on the support of the kernel row"
        )));
    }
    Ok(logs.iter().map(|l| (l - norm).exp()).collect())
}

pub fn sample_categorical(pmf: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in pmf.iter().enumerate() {
        if p > 0.0 {
            last = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
    }
    last
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteKernel<T: Real> {
    /// Forward matrix; `None` when it coincides with the auxiliary one.
    pub forward: Option<DMatrix<T>>,
    pub aux: DMatrix<T>,
    aux_sparse: Option<SparseRows<T>>,
}

impl<T: Real> FiniteKernel<T> {
    /// Kernel guided by its own transition matrix.
    pub fn exact(k: DMatrix<T>) -> Result<Self> {
        validate_stochastic(&k, "transition matrix")?;
        Ok(Self::build(None, k))
    }

    pub fn with_aux(forward: DMatrix<T>, aux: DMatrix<T>) -> Result<Self> {
        validate_stochastic(&forward, "forward transition matrix")?;
        validate_stochastic(&aux, "auxiliary transition matrix")?;
        if forward.shape() != aux.shape() {
            return Err(Error::Dimension(format!(
                "forward {:?} and auxiliary {:?} shapes differ",
                forward.shape(),
                aux.shape()
            )));
        }
        if forward == aux {
            return Ok(Self::build(None, aux));
        }
        Ok(Self::build(Some(forward), aux))
    }

    fn build(forward: Option<DMatrix<T>>, aux: DMatrix<T>) -> Self {
        let sparse = SparseRows::from_dense(&aux);
        let aux_sparse = if 2 * sparse.nnz() <= aux.len() { Some(sparse) } else { None };
        Self { forward, aux, aux_sparse }
    }

    pub fn forward_matrix(&self) -> &DMatrix<T> {
        self.forward.as_ref().unwrap_or(&self.aux)
    }

    pub fn is_exact(&self) -> bool {
        self.forward.is_none()
    }

    pub fn uses_sparse_path(&self) -> bool {
        self.aux_sparse.is_some()
    }

    pub fn source_states(&self) -> usize {
        self.aux.nrows()
    }

    pub fn target_states(&self) -> usize {
        self.aux.ncols()
    }

    fn forward_row(&self, x: usize) -> Result<Vec<T>> {
        let k = self.forward_matrix();
        if x >= k.nrows() {
            return Err(Error::Validation(format!("state {x} outside 0..{}", k.nrows())));
        }
        Ok(k.row(x).iter().copied().collect())
    }

    pub fn log_pullback(&self, g: &VecPotential<T>) -> Result<VecPotential<T>> {
        if g.len() != self.target_states() {
            return Err(Error::Dimension(format!(
                "kernel has {} target states but potential has length {}",
                self.target_states(),
                g.len()
            )));
        }
        let log = match &self.aux_sparse {
            Some(s) => s.log_matvec(&g.log),
            None => DVector::from_iterator(
                self.aux.nrows(),
                (0..self.aux.nrows()).map(|i| {
                    let row: Vec<T> = self.aux.row(i).iter().copied().collect();
                    log_row_dot(&row, &g.log)
                }),
            ),
        };
        Ok(VecPotential { log })
    }

    /// Leaf message for an observed target state: column `k` of the
    /// auxiliary matrix.
    pub fn leaf_potential(&self, k: usize) -> Result<VecPotential<T>> {
        if k >= self.target_states() {
            return Err(Error::Validation(format!(
                "observed state {k} outside 0..{}",
                self.target_states()
            )));
        }
        VecPotential::from_values(&self.aux.column(k).iter().copied().collect::<Vec<_>>())
    }

    /// Leaf weight with the exact emission probability as numerator.
    pub fn leaf_log_weight(&self, k: usize, g_edge: &VecPotential<T>, x: usize) -> Result<T> {
        let p = self.forward_row(x)?[k];
        let num = if p > T::zero() { p.ln() } else { neg_inf() };
        let den = g_edge.log_at(x)?;
        if self.is_exact() {
            return Ok(T::zero());
        }
        Ok(num - den)
    }

    pub fn guided_pmf(&self, g: &VecPotential<T>, x: usize) -> Result<Vec<f64>> {
        tilted_pmf(&self.forward_row(x)?, &g.log)
    }
}

/// Unit-vector leaf potential for an exactly observed state.
pub fn init_leaf_unit<T: Real>(r: usize, k: usize) -> Result<VecPotential<T>> {
    VecPotential::unit(r, k)
}

impl<T: Real> GuidedKernel for FiniteKernel<T> {
    type Potential = VecPotential<T>;

    fn pullback(&self, g: &VecPotential<T>) -> Result<VecPotential<T>> {
        self.log_pullback(g)
    }

    fn guided_sample(&self, g: &VecPotential<T>, x: &usize, rng: &mut dyn RngCore) -> Result<usize> {
        sample_tilted_row(&self.forward_row(*x)?, &g.log, rng)
            .map_err(|e| Error::Sampling(format!("from state {x}: {e}")))
    }

    fn log_weight(&self, g: &VecPotential<T>, g_edge: &VecPotential<T>, x: &usize) -> Result<T> {
        if self.is_exact() {
            return Ok(T::zero());
        }
        let num = log_row_dot(&self.forward_row(*x)?, &g.log);
        let den = g_edge.log_at(*x)?;
        if den == neg_inf() {
            return Ok(neg_inf());
        }
        Ok(num - den)
    }
}

/// Factorized potential `g(x) = prod_i g^i(x_i)` over `n` particles.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePotential<T: Real> {
    pub factors: Vec<VecPotential<T>>,
}

impl<T: Real> ParticlePotential<T> {
    pub fn ones(n: usize, r: usize) -> Self {
        Self { factors: vec![VecPotential::ones(r); n] }
    }

    pub fn particles(&self) -> usize {
        self.factors.len()
    }

    /// Number of stored scalar entries (`n * R`).
    pub fn entries(&self) -> usize {
        self.factors.iter().map(|f| f.len()).sum()
    }

    pub fn log_value(&self, x: &[usize]) -> Result<T> {
        if x.len() != self.factors.len() {
            return Err(Error::Dimension(format!(
                "configuration of {} particles against potential for {}",
                x.len(),
                self.factors.len()
            )));
        }
        let mut s = T::zero();
        for (f, &xi) in self.factors.iter().zip(x) {
            s += f.log_at(xi)?;
        }
        Ok(s)
    }

    pub fn fuse_all(gs: &[Self]) -> Result<Self> {
        let first = gs
            .first()
            .ok_or_else(|| Error::Validation("fusion of an empty list".into()))?;
        let n = first.particles();
        let mut factors = Vec::with_capacity(n);
        for i in 0..n {
            let col: Vec<VecPotential<T>> = gs
                .iter()
                .map(|g| {
                    g.factors.get(i).cloned().ok_or_else(|| {
                        Error::Dimension("fusing particle potentials of different sizes".into())
                    })
                })
                .collect::<Result<_>>()?;
            factors.push(VecPotential::fuse_all(&col)?);
        }
        if gs.iter().any(|g| g.particles() != n) {
            return Err(Error::Dimension("fusing particle potentials of different sizes".into()));
        }
        Ok(Self { factors })
    }
}

impl<T: Real> Potential for ParticlePotential<T> {
    type State = Vec<usize>;
    type Scalar = T;

    fn log_eval(&self, x: &Vec<usize>) -> Result<T> {
        self.log_value(x)
    }

    fn fuse(gs: &[Self]) -> Result<Self> {
        Self::fuse_all(gs)
    }
}

/// Row `K_i(x)[x_i, ·]` of particle `i`'s forward matrix at configuration `x`.
pub type ParticleRowFn<T> = Arc<dyn Fn(usize, &[usize]) -> Vec<T> + Send + Sync>;

/// Interacting particles with state-independent per-particle auxiliary matrices.
#[derive(Clone)]
pub struct ParticleKernel<T: Real> {
    pub states: usize,
    pub aux: Vec<FiniteKernel<T>>,
    /// `None`: each particle evolves under its auxiliary matrix.
    pub forward: Option<ParticleRowFn<T>>,
}

impl<T: Real> fmt::Debug for ParticleKernel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParticleKernel")
            .field("states", &self.states)
            .field("particles", &self.aux.len())
            .field("interacting", &self.forward.is_some())
            .finish()
    }
}

impl<T: Real> ParticleKernel<T> {
    pub fn new(aux: Vec<DMatrix<T>>, forward: Option<ParticleRowFn<T>>) -> Result<Self> {
        let first = aux
            .first()
            .ok_or_else(|| Error::Validation("particle system without particles".into()))?;
        let r = first.nrows();
        let mut kernels = Vec::with_capacity(aux.len());
        for (i, m) in aux.into_iter().enumerate() {
            if m.nrows() != r || m.ncols() != r {
                return Err(Error::Dimension(format!(
                    "auxiliary matrix of particle {i} is {}x{}, expected {r}x{r}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            kernels.push(FiniteKernel::exact(m)?);
        }
        Ok(Self { states: r, aux: kernels, forward })
    }

    pub fn particles(&self) -> usize {
        self.aux.len()
    }

    pub fn is_exact(&self) -> bool {
        self.forward.is_none()
    }

    fn check_config(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.particles() || x.iter().any(|&s| s >= self.states) {
            return Err(Error::Validation(format!(
                "configuration {x:?} invalid for {} particles with {} states",
                self.particles(),
                self.states
            )));
        }
        Ok(())
    }

    /// Forward row of particle `i` at configuration `x`.
    pub fn row(&self, i: usize, x: &[usize]) -> Result<Vec<T>> {
        match &self.forward {
            None => Ok(self.aux[i].aux.row(x[i]).iter().copied().collect()),
            Some(f) => {
                let row = f(i, x);
                if row.len() != self.states {
                    return Err(Error::Dimension(format!(
                        "forward row of particle {i} has length {}",
                        row.len()
                    )));
                }
                let s: f64 = row.iter().map(|v| to_f64(*v)).sum();
                if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| *v < T::zero()) {
                    return Err(Error::Validation(format!(
                        "forward row of particle {i} at {x:?} is not a probability vector"
                    )));
                }
                Ok(row)
            }
        }
    }

    fn check_potential(&self, g: &ParticlePotential<T>) -> Result<()> {
        if g.particles() != self.particles() {
            return Err(Error::Dimension(format!(
                "potential for {} particles, kernel has {}",
                g.particles(),
                self.particles()
            )));
        }
        Ok(())
    }

    pub fn guided_pmfs(&self, g: &ParticlePotential<T>, x: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_config(x)?;
        self.check_potential(g)?;
        (0..self.particles())
            .map(|i| tilted_pmf(&self.row(i, x)?, &g.factors[i].log))
            .collect()
    }

    pub fn leaf_potential(&self, obs: &[usize]) -> Result<ParticlePotential<T>> {
        self.check_config(obs)?;
        let factors = self
            .aux
            .iter()
            .zip(obs)
            .map(|(k, &o)| k.leaf_potential(o))
            .collect::<Result<_>>()?;
        Ok(ParticlePotential { factors })
    }

    pub fn leaf_log_weight(&self, obs: &[usize], g_edge: &ParticlePotential<T>, x: &[usize]) -> Result<T> {
        self.check_config(x)?;
        self.check_config(obs)?;
        if self.is_exact() {
            return Ok(T::zero());
        }
        let mut s = T::zero();
        for i in 0..self.particles() {
            let p = self.row(i, x)?[obs[i]];
            if p <= T::zero() {
                return Ok(neg_inf());
            }
            s += p.ln() - g_edge.factors[i].log_at(x[i])?;
        }
        Ok(s)
    }
}

impl<T: Real> GuidedKernel for ParticleKernel<T> {
    type Potential = ParticlePotential<T>;

    fn pullback(&self, g: &ParticlePotential<T>) -> Result<ParticlePotential<T>> {
        self.check_potential(g)?;
        let factors = self
            .aux
            .iter()
            .zip(&g.factors)
            .map(|(k, f)| k.log_pullback(f))
            .collect::<Result<_>>()?;
        Ok(ParticlePotential { factors })
    }

    fn guided_sample(
        &self,
        g: &ParticlePotential<T>,
        x: &Vec<usize>,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let pmfs = self
            .guided_pmfs(g, x)
            .map_err(|e| Error::Sampling(format!("from configuration {x:?}: {e}")))?;
        Ok(pmfs.iter().map(|p| sample_categorical(p, rng)).collect())
    }

    fn log_weight(
        &self,
        g: &ParticlePotential<T>,
        g_edge: &ParticlePotential<T>,
        x: &Vec<usize>,
    ) -> Result<T> {
        self.check_config(x)?;
        self.check_potential(g)?;
        if self.is_exact() {
            return Ok(T::zero());
        }
        let mut s = T::zero();
        for i in 0..self.particles() {
            let den = g_edge.factors[i].log_at(x[i])?;
            if den == neg_inf() {
                return Ok(neg_inf());
            }
            s += log_row_dot(&self.row(i, x)?, &g.factors[i].log) - den;
        }
        Ok(s)
    }
}
