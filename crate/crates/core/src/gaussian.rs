//! Nonlinear-Gaussian kernels guided by linear-Gaussian auxiliary kernels.
//!
//! Potentials are triples `(c, F, H)` with `g(y) = exp(c + y'F - y'Hy/2)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, condition_number, log_det_cholesky, log_det_positive, log_normal_density, solve,
    solve_vec, symmetrize,
};
use crate::potential::{GuidedKernel, Potential};
use crate::scalar::{lit, to_f64, Real};

/// Condition-number threshold above which the inversion-free route is used.
pub const DIRECT_ROUTE_MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussPotential<T: Real> {
    pub c: T,
    pub f: DVector<T>,
    pub h: DMatrix<T>,
}

impl<T: Real> GaussPotential<T> {
    pub fn new(c: T, f: DVector<T>, h: DMatrix<T>) -> Result<Self> {
        if h.nrows() != f.len() || h.ncols() != f.len() {
            return Err(Error::Dimension(format!(
                "potential F has length {} but H is {}x{}",
                f.len(),
                h.nrows(),
                h.ncols()
            )));
        }
        Ok(Self { c, f, h: symmetrize(&h) })
    }

    /// The constant potential `g ≡ exp(c)` in dimension `d`.
    pub fn constant(d: usize, c: T) -> Self {
        Self {
            c,
            f: DVector::zeros(d),
            h: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn log_value(&self, x: &DVector<T>) -> Result<T> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "state of length {} evaluated against potential of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self.c + x.dot(&self.f) - (x.transpose() * &self.h * x)[(0, 0)] * lit::<T>(0.5))
    }

    pub fn fuse_all(gs: &[Self]) -> Result<Self> {
        let first = gs
            .first()
            .ok_or_else(|| Error::Validation("fusion of an empty list".into()))?;
        let mut out = first.clone();
        for g in &gs[1..] {
            if g.dim() != out.dim() {
                return Err(Error::Dimension(format!(
                    "fusing potentials of dimensions {} and {}",
                    out.dim(),
                    g.dim()
                )));
            }
            out.c += g.c;
            out.f += &g.f;
            out.h += &g.h;
        }
        out.h = symmetrize(&out.h);
        Ok(out)
    }

    /// Leaf potential `x -> φ(v; Φx + β, Q)`.
    pub fn init_leaf(v: &DVector<T>, aux: &LinearGauss<T>) -> Result<Self> {
        let ch = cholesky(&aux.q, "leaf covariance")?;
        let r = v - &aux.beta;
        let qinv_r = ch.solve(&r);
        let qinv_phi = ch.solve(&aux.phi);
        let c = log_normal_density(&aux.beta, v, &aux.q)?;
        let f = aux.phi.transpose() * qinv_r;
        let h = symmetrize(&(aux.phi.transpose() * qinv_phi));
        Ok(Self { c, f, h })
    }

    /// `log ∫ g(y) N(y; m, q) dy`, valid for any symmetric `H` with
    /// `I + HQ` of positive determinant.
    pub fn log_integral_against_normal(&self, m: &DVector<T>, q: &DMatrix<T>) -> Result<T> {
        let zero = self.pullback_parts(&DMatrix::zeros(self.dim(), 0), m, q)?;
        Ok(zero.c)
    }

    fn pullback_parts(
        &self,
        phi: &DMatrix<T>,
        beta: &DVector<T>,
        q: &DMatrix<T>,
    ) -> Result<GaussPotential<T>> {
        let d = self.dim();
        if phi.nrows() != d || beta.len() != d || q.nrows() != d || q.ncols() != d {
            return Err(Error::Dimension(format!(
                "kernel maps into dimension {} (Φ {}x{}, β {}, Q {}x{}) but potential has dimension {}",
                phi.nrows(),
                phi.nrows(),
                phi.ncols(),
                beta.len(),
                q.nrows(),
                q.ncols(),
                d
            )));
        }
        let cond = condition_number(&self.h);
        let direct = d > 0
            && cond <= DIRECT_ROUTE_MAX_CONDITION
            && crate::linalg::is_positive_definite(&self.h);
        if direct {
            self.pullback_direct(phi, beta, q)
        } else {
            self.pullback_identity(phi, beta, q, cond)
        }
    }

    fn pullback_direct(
        &self,
        phi: &DMatrix<T>,
        beta: &DVector<T>,
        q: &DMatrix<T>,
    ) -> Result<GaussPotential<T>> {
        let d = self.dim();
        let half = lit::<T>(0.5);
        let ch_h = cholesky(&self.h, "pullback: H")?;
        let hinv = ch_h.inverse();
        let hinv_f = ch_h.solve(&self.f);
        let c_mat = symmetrize(&(q + &hinv));
        let ch_c = cholesky(&c_mat, "pullback: C = Q + H^-1")?;
        let h_bar = symmetrize(&(phi.transpose() * ch_c.solve(phi)));
        let f_bar = phi.transpose() * ch_c.solve(&(&hinv_f - beta));
        let log_can0 = -lit::<T>(d as f64) * half * lit::<T>(std::f64::consts::TAU.ln())
            + log_det_cholesky(&ch_h) * half
            - self.f.dot(&hinv_f) * half;
        let c_bar = self.c - log_can0 + log_normal_density(beta, &hinv_f, &c_mat)?;
        Ok(GaussPotential { c: c_bar, f: f_bar, h: h_bar })
    }

    fn pullback_identity(
        &self,
        phi: &DMatrix<T>,
        beta: &DVector<T>,
        q: &DMatrix<T>,
        cond: f64,
    ) -> Result<GaussPotential<T>> {
        let d = self.dim();
        let half = lit::<T>(0.5);
        let m = DMatrix::<T>::identity(d, d) + &self.h * q;
        let diag = |e: Error| match e {
            Error::Numeric { context, detail } => Error::Numeric {
                context,
                detail: format!("{detail}; cond(H) = {cond:.3e}"),
            },
            other => other,
        };
        let logdet = log_det_positive(&m, "pullback: I + HQ").map_err(diag)?;
        let u = solve_vec(&m, &self.f, "pullback: I + HQ").map_err(diag)?;
        let cinv = symmetrize(&solve(&m, &self.h, "pullback: I + HQ").map_err(diag)?);
        let h_bar = symmetrize(&(phi.transpose() * &cinv * phi));
        let f_bar = phi.transpose() * (&u - &cinv * beta);
        let c_bar = self.c - logdet * half + self.f.dot(&(q * &u)) * half + beta.dot(&u)
            - beta.dot(&(&cinv * beta)) * half;
        Ok(GaussPotential { c: c_bar, f: f_bar, h: h_bar })
    }
}

impl<T: Real> Potential for GaussPotential<T> {
    type State = DVector<T>;
    type Scalar = T;

    fn log_eval(&self, x: &DVector<T>) -> Result<T> {
        self.log_value(x)
    }

    fn fuse(gs: &[Self]) -> Result<Self> {
        Self::fuse_all(gs)
    }
}

/// `y | x ~ N(Φx + β, Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGauss<T: Real> {
    pub phi: DMatrix<T>,
    pub beta: DVector<T>,
    pub q: DMatrix<T>,
}

impl<T: Real> LinearGauss<T> {
    pub fn new(phi: DMatrix<T>, beta: DVector<T>, q: DMatrix<T>) -> Result<Self> {
        if phi.nrows() != beta.len() || q.nrows() != beta.len() || q.ncols() != beta.len() {
            return Err(Error::Dimension(format!(
                "linear Gaussian kernel: Φ {}x{}, β {}, Q {}x{}",
                phi.nrows(),
                phi.ncols(),
                beta.len(),
                q.nrows(),
                q.ncols()
            )));
        }
        cholesky(&q, "kernel covariance")?;
        Ok(Self { phi, beta, q: symmetrize(&q) })
    }

    pub fn source_dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.beta.len()
    }

    pub fn mean(&self, x: &DVector<T>) -> DVector<T> {
        &self.phi * x + &self.beta
    }
}

pub type VecMap<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
pub type MatMap<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;

/// Forward dynamics of a Gaussian kernel.
#[derive(Clone)]
pub enum GaussForward<T: Real> {
    /// The forward kernel coincides with the auxiliary one.
    Auxiliary,
    /// `y | x ~ N(μ(x), Q(x))`.
    Map { mean: VecMap<T>, cov: MatMap<T> },
}

impl<T: Real> fmt::Debug for GaussForward<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GaussForward::Auxiliary => write!(f, "Auxiliary"),
            GaussForward::Map { .. } => write!(f, "Map(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussKernel<T: Real> {
    pub forward: GaussForward<T>,
    pub aux: LinearGauss<T>,
}

impl<T: Real> GaussKernel<T> {
    /// A linear kernel used as its own auxiliary.
    pub fn linear(aux: LinearGauss<T>) -> Self {
        Self { forward: GaussForward::Auxiliary, aux }
    }

    pub fn nonlinear(mean: VecMap<T>, cov: MatMap<T>, aux: LinearGauss<T>) -> Self {
        Self {
            forward: GaussForward::Map { mean, cov },
            aux,
        }
    }

    /// Forward mean and covariance at `x`.
    pub fn moments(&self, x: &DVector<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        if x.len() != self.aux.source_dim() {
            return Err(Error::Dimension(format!(
                "kernel source dimension {} but state has length {}",
                self.aux.source_dim(),
                x.len()
            )));
        }
        match &self.forward {
            GaussForward::Auxiliary => Ok((self.aux.mean(x), self.aux.q.clone())),
            GaussForward::Map { mean, cov } => {
                let m = mean(x);
                let q = cov(x);
                if m.len() != self.aux.target_dim() || q.nrows() != m.len() || q.ncols() != m.len() {
                    return Err(Error::Dimension(format!(
                        "forward map returned mean {} / covariance {}x{} for target dimension {}",
                        m.len(),
                        q.nrows(),
                        q.ncols(),
                        self.aux.target_dim()
                    )));
                }
                Ok((m, q))
            }
        }
    }

    pub fn pullback_potential(&self, g: &GaussPotential<T>) -> Result<GaussPotential<T>> {
        g.pullback_parts(&self.aux.phi, &self.aux.beta, &self.aux.q)
    }

    /// `log ∫ g dκ(x)` under the forward kernel.
    pub fn log_forward_integral(&self, g: &GaussPotential<T>, x: &DVector<T>) -> Result<T> {
        let (m, q) = self.moments(x)?;
        g.log_integral_against_normal(&m, &q)
    }

    /// Mean and Cholesky factor of the precision of the guided transition.
    fn guided_moments(
        &self,
        g: &GaussPotential<T>,
        x: &DVector<T>,
    ) -> Result<(DVector<T>, nalgebra::Cholesky<T, nalgebra::Dyn>)> {
        let (m, q) = self.moments(x)?;
        if g.dim() != m.len() {
            return Err(Error::Dimension(format!(
                "potential dimension {} but kernel target dimension {}",
                g.dim(),
                m.len()
            )));
        }
        let ch_q = cholesky(&q, "guided sample: Q(x)")?;
        let precision = symmetrize(&(&g.h + ch_q.inverse()));
        let pot = &g.f + ch_q.solve(&m);
        let ch_p = cholesky(&precision, "guided sample: H + Q(x)^-1").map_err(|e| {
            Error::Sampling(format!("non positive definite guided precision at x = {:?}: {e}", to_vec(x)))
        })?;
        let mean = ch_p.solve(&pot);
        Ok((mean, ch_p))
    }

    /// Guided draw as a deterministic function of standard-normal innovations.
    pub fn guided_from_innovation(
        &self,
        g: &GaussPotential<T>,
        x: &DVector<T>,
        z: &DVector<T>,
    ) -> Result<DVector<T>> {
        let (mean, ch_p) = self.guided_moments(g, x)?;
        if z.len() != mean.len() {
            return Err(Error::Dimension("innovation length mismatch".into()));
        }
        let shift = ch_p
            .l_dirty()
            .transpose()
            .solve_upper_triangular(z)
            .ok_or_else(|| Error::Sampling("triangular solve failed".into()))?;
        Ok(mean + shift)
    }

    /// Inverse of [`GaussKernel::guided_from_innovation`].
    pub fn innovation_from_sample(
        &self,
        g: &GaussPotential<T>,
        x: &DVector<T>,
        y: &DVector<T>,
    ) -> Result<DVector<T>> {
        let (mean, ch_p) = self.guided_moments(g, x)?;
        if y.len() != mean.len() {
            return Err(Error::Dimension("sample length mismatch".into()));
        }
        Ok(ch_p.l_dirty().lower_triangle().transpose() * (y - mean))
    }

    /// Guided mean and covariance (for tests and diagnostics).
    pub fn guided_distribution(
        &self,
        g: &GaussPotential<T>,
        x: &DVector<T>,
    ) -> Result<(DVector<T>, DMatrix<T>)> {
        let (mean, ch_p) = self.guided_moments(g, x)?;
        Ok((mean, ch_p.inverse()))
    }

    pub fn target_dim(&self) -> usize {
        self.aux.target_dim()
    }

    /// Leaf weight: exact emission density over the leaf message.
    pub fn leaf_log_weight(
        &self,
        obs: &DVector<T>,
        g_edge: &GaussPotential<T>,
        x: &DVector<T>,
    ) -> Result<T> {
        if matches!(self.forward, GaussForward::Auxiliary) {
            return Ok(T::zero());
        }
        let (m, q) = self.moments(x)?;
        Ok(log_normal_density(obs, &m, &q)? - g_edge.log_value(x)?)
    }
}

pub(crate) fn standard_normal_vec<T: Real>(d: usize, rng: &mut dyn RngCore) -> DVector<T> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        lit::<T>(z)
    })
}

fn to_vec<T: Real>(x: &DVector<T>) -> Vec<f64> {
    x.iter().map(|v| to_f64(*v)).collect()
}

impl<T: Real> GuidedKernel for GaussKernel<T> {
    type Potential = GaussPotential<T>;

    fn pullback(&self, g: &GaussPotential<T>) -> Result<GaussPotential<T>> {
        self.pullback_potential(g)
    }

    fn guided_sample(
        &self,
        g: &GaussPotential<T>,
        x: &DVector<T>,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<T>> {
        let z = standard_normal_vec(self.target_dim(), rng);
        self.guided_from_innovation(g, x, &z)
    }

    fn log_weight(
        &self,
        g: &GaussPotential<T>,
        g_edge: &GaussPotential<T>,
        x: &DVector<T>,
    ) -> Result<T> {
        if matches!(self.forward, GaussForward::Auxiliary) {
            return Ok(T::zero());
        }
        Ok(self.log_forward_integral(g, x)? - g_edge.log_value(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }
    fn m(r: usize, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, x.len() / r, x)
    }
    fn scalar_aux(phi: f64, beta: f64, q: f64) -> LinearGauss<f64> {
        LinearGauss::new(m(1, &[phi]), v(&[beta]), m(1, &[q])).unwrap()
    }

    #[test]
    fn unit_pullback_example() {
        let g = GaussPotential::new(0.0, v(&[0.0]), m(1, &[1.0])).unwrap();
        let k = GaussKernel::linear(scalar_aux(1.0, 0.0, 1.0));
        let p = k.pullback(&g).unwrap();
        assert_relative_eq!(p.c, -0.5 * 2f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(p.f[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(p.h[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn near_identity_kernel_returns_input() {
        let g = GaussPotential::new(0.3, v(&[1.0, -2.0]), m(2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let aux = LinearGauss::new(DMatrix::identity(2, 2), v(&[0.0, 0.0]), DMatrix::identity(2, 2) * 1e-8).unwrap();
        let p = GaussKernel::linear(aux).pullback(&g).unwrap();
        assert_relative_eq!(p.c, g.c, epsilon = 1e-6);
        assert_relative_eq!(p.f, g.f, epsilon = 1e-6);
        assert_relative_eq!(p.h, g.h, epsilon = 1e-6);
    }

    #[test]
    fn direct_and_identity_routes_agree() {
        let g = GaussPotential::new(-0.4, v(&[0.7, 0.1]), m(2, &[1.5, -0.2, -0.2, 0.8])).unwrap();
        let phi = m(2, &[0.9, 0.1, -0.3, 1.1]);
        let beta = v(&[0.2, -0.5]);
        let q = m(2, &[0.5, 0.1, 0.1, 0.4]);
        let a = g.pullback_direct(&phi, &beta, &q).unwrap();
        let b = g.pullback_identity(&phi, &beta, &q, 1.0).unwrap();
        assert_relative_eq!(a.c, b.c, epsilon = 1e-12);
        assert_relative_eq!(a.f, b.f, epsilon = 1e-12);
        assert_relative_eq!(a.h, b.h, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_h_uses_identity_route() {
        let g = GaussPotential::new(0.0, v(&[1.0, 0.0]), m(2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let aux = LinearGauss::new(DMatrix::identity(2, 2), v(&[0.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
        let p = GaussKernel::linear(aux).pullback(&g).unwrap();
        // first coordinate behaves like the scalar example, second is untouched
        assert_relative_eq!(p.h[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(p.h[(1, 1)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(p.f[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(p.c, -0.5 * 2f64.ln() + 0.25, epsilon = 1e-14);
    }

    #[test]
    fn fuse_sums_components() {
        let a = GaussPotential::new(1.0, v(&[2.0]), m(1, &[3.0])).unwrap();
        let b = GaussPotential::new(0.5, v(&[-1.0]), m(1, &[1.0])).unwrap();
        let f = GaussPotential::fuse_all(&[a.clone(), b]).unwrap();
        assert_eq!((f.c, f.f[0], f.h[(0, 0)]), (1.5, 1.0, 4.0));
        assert_eq!(GaussPotential::fuse_all(std::slice::from_ref(&a)).unwrap(), a);
        let sq = GaussPotential::fuse_all(&[a.clone(), a.clone()]).unwrap();
        let x = v(&[0.37]);
        assert_relative_eq!(sq.log_value(&x).unwrap(), 2.0 * a.log_value(&x).unwrap(), epsilon = 1e-14);
        assert!(GaussPotential::<f64>::fuse_all(&[]).is_err());
    }

    #[test]
    fn leaf_initialisation() {
        let g = GaussPotential::init_leaf(&v(&[0.0]), &scalar_aux(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(g.c, -0.5 * std::f64::consts::TAU.ln(), epsilon = 1e-15);
        assert_eq!((g.f[0], g.h[(0, 0)]), (0.0, 1.0));
        let centred = GaussPotential::init_leaf(&v(&[0.4]), &scalar_aux(2.0, 0.4, 3.0)).unwrap();
        assert_eq!(centred.f[0], 0.0);
    }

    #[test]
    fn diagonal_leaf_splits_into_scalar_leaves() {
        let aux = LinearGauss::new(m(2, &[1.0, 0.0, 0.0, 2.0]), v(&[0.1, -0.2]), m(2, &[0.5, 0.0, 0.0, 2.0])).unwrap();
        let obs = v(&[0.3, 1.0]);
        let joint = GaussPotential::init_leaf(&obs, &aux).unwrap();
        let a = GaussPotential::init_leaf(&v(&[0.3]), &scalar_aux(1.0, 0.1, 0.5)).unwrap();
        let b = GaussPotential::init_leaf(&v(&[1.0]), &scalar_aux(2.0, -0.2, 2.0)).unwrap();
        assert_relative_eq!(joint.c, a.c + b.c, epsilon = 1e-14);
        assert_relative_eq!(joint.f[0], a.f[0], epsilon = 1e-14);
        assert_relative_eq!(joint.f[1], b.f[0], epsilon = 1e-14);
        assert_relative_eq!(joint.h[(1, 1)], b.h[(0, 0)], epsilon = 1e-14);
        assert_eq!(joint.h[(0, 1)], 0.0);
    }

    #[test]
    fn exact_kernel_has_zero_weight() {
        let k = GaussKernel::linear(scalar_aux(0.8, 0.1, 0.3));
        let g = GaussPotential::new(0.2, v(&[0.4]), m(1, &[2.0])).unwrap();
        let ge = k.pullback(&g).unwrap();
        assert_eq!(k.log_weight(&g, &ge, &v(&[1.3])).unwrap(), 0.0);
        // the same linear dynamics written as a map give a numerically zero weight
        let aux = scalar_aux(0.8, 0.1, 0.3);
        let k2 = GaussKernel::nonlinear(
            Arc::new(|x: &DVector<f64>| x * 0.8 + v(&[0.1])),
            Arc::new(|_: &DVector<f64>| m(1, &[0.3])),
            aux,
        );
        assert!(k2.log_weight(&g, &ge, &v(&[1.3])).unwrap().abs() < 1e-12);
    }

    #[test]
    fn conjugate_guided_posterior() {
        let k = GaussKernel::linear(scalar_aux(1.0, 0.0, 1.0));
        let g = GaussPotential::new(0.0, v(&[1.0]), m(1, &[1.0])).unwrap();
        let x = v(&[0.6]);
        let (mean, cov) = k.guided_distribution(&g, &x).unwrap();
        assert_relative_eq!(mean[0], 0.8, epsilon = 1e-14);
        assert_relative_eq!(cov[(0, 0)], 0.5, epsilon = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| k.guided_sample(&g, &x, &mut rng).unwrap()[0]).collect();
        let mu = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mu - 0.8).abs() < 4.0 * (0.5f64 / n as f64).sqrt());
        assert!((var - 0.5).abs() < 4.0 * 0.5 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn guided_limits() {
        let k = GaussKernel::linear(scalar_aux(1.0, 0.5, 2.0));
        let x = v(&[1.0]);
        let flat = GaussPotential::new(0.0, v(&[0.0]), m(1, &[1e-12])).unwrap();
        let (mean, cov) = k.guided_distribution(&flat, &x).unwrap();
        assert_relative_eq!(mean[0], 1.5, epsilon = 1e-9);
        assert_relative_eq!(cov[(0, 0)], 2.0, epsilon = 1e-9);
        let sharp = GaussPotential::new(0.0, v(&[1e6 * -0.7]), m(1, &[1e6])).unwrap();
        let (mean, cov) = k.guided_distribution(&sharp, &x).unwrap();
        assert!((mean[0] + 0.7).abs() < 1e-5 && cov[(0, 0)] < 1e-5);
    }

    #[test]
    fn single_precision_pullback() {
        let g = GaussPotential::<f32>::new(0.0, DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let aux = LinearGauss::<f32>::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let p = GaussKernel::linear(aux).pullback(&g).unwrap();
        assert!((p.h[(0, 0)] - 0.5).abs() < 1e-6);
        assert!((p.c + 0.5 * 2f32.ln()).abs() < 1e-6);
    }
}
