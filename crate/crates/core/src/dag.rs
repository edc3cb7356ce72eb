//! Multi-parent edges: joint kernels over stacked parent states, and the
//! factorization of their pullbacks into one message per parent.
//!
//! For parents `u ∈ pa(s)` with a parent prior `π`, the message sent to `u`
//! is `g_u(x_u) = E_π[(κ̃ g)(X_pa) | X_u = x_u]`. The guided weight of the
//! edge becomes `log ∫ g dκ(x_pa) - Σ_u log g_u(x_u)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::finite::{FiniteKernel, VecPotential};
use crate::gaussian::{GaussKernel, GaussPotential};
use crate::linalg::{cholesky, log_det_cholesky, log_sum_exp, symmetrize};
use crate::potential::GuidedKernel;
use crate::scalar::{lit, neg_inf, Real};

/// Mixed-radix index of a parent configuration; the first parent is most significant.
pub fn config_index(sizes: &[usize], x: &[usize]) -> Result<usize> {
    if sizes.len() != x.len() {
        return Err(Error::Dimension(format!("{} parent states for {} parents", x.len(), sizes.len())));
    }
    let mut idx = 0;
    for (&r, &xi) in sizes.iter().zip(x) {
        if xi >= r {
            return Err(Error::Domain(format!("parent state {xi} outside 0..{r}")));
        }
        idx = idx * r + xi;
    }
    Ok(idx)
}

pub fn config_digits(sizes: &[usize], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (slot, &r) in out.iter_mut().zip(sizes).rev() {
        *slot = idx % r;
        idx /= r;
    }
    out
}

/// Parent prior for finite-state multi-parent edges.
#[derive(Clone, Debug, PartialEq)]
pub enum FinitePrior {
    /// Independent marginals, one pmf per parent.
    Product(Vec<Vec<f64>>),
    /// Joint pmf over mixed-radix configurations.
    Joint(Vec<f64>),
}

impl FinitePrior {
    fn validate(&self, sizes: &[usize]) -> Result<()> {
        let check = |p: &[f64], what: &str| -> Result<()> {
            let s: f64 = p.iter().sum();
            if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("{what} is not a probability vector")));
            }
            Ok(())
        };
        match self {
            FinitePrior::Product(ms) => {
                if ms.len() != sizes.len() || ms.iter().zip(sizes).any(|(m, &r)| m.len() != r) {
                    return Err(Error::Dimension("parent prior marginals do not match parent state spaces".into()));
                }
                ms.iter().try_for_each(|m| check(m, "parent prior marginal"))
            }
            FinitePrior::Joint(p) => {
                if p.len() != sizes.iter().product::<usize>() {
                    return Err(Error::Dimension("joint parent prior has the wrong number of configurations".into()));
                }
                check(p, "joint parent prior")
            }
        }
    }

    fn marginals(&self, sizes: &[usize]) -> Vec<Vec<f64>> {
        match self {
            FinitePrior::Product(ms) => ms.clone(),
            FinitePrior::Joint(p) => {
                let mut ms: Vec<Vec<f64>> = sizes.iter().map(|&r| vec![0.0; r]).collect();
                for (c, w) in p.iter().enumerate() {
                    for (u, d) in config_digits(sizes, c).into_iter().enumerate() {
                        ms[u][d] += w;
                    }
                }
                ms
            }
        }
    }

    /// `log π(c | x_u = digit_u(c))`; for null conditioning events the
    /// co-parents fall back to independent marginals.
    fn log_conditional(&self, sizes: &[usize], marg: &[Vec<f64>], u: usize, c: usize) -> f64 {
        let digits = config_digits(sizes, c);
        let independent = || {
            digits
                .iter()
                .enumerate()
                .filter(|&(w, _)| w != u)
                .map(|(w, &d)| marg[w][d].ln())
                .sum::<f64>()
        };
        match self {
            FinitePrior::Product(_) => independent(),
            FinitePrior::Joint(p) => {
                let m = marg[u][digits[u]];
                if m > 0.0 {
                    p[c].ln() - m.ln()
                } else {
                    independent()
                }
            }
        }
    }
}

/// `g_u(i) = E_π[g(X) | X_u = i]` for a potential on mixed-radix configurations.
pub fn factorize_finite<T: Real>(
    g: &VecPotential<T>,
    sizes: &[usize],
    prior: &FinitePrior,
) -> Result<Vec<VecPotential<T>>> {
    prior.validate(sizes)?;
    let total: usize = sizes.iter().product();
    if g.len() != total {
        return Err(Error::Dimension(format!(
            "joint potential of length {} over {total} parent configurations",
            g.len()
        )));
    }
    let marg = prior.marginals(sizes);
    let mut out = Vec::with_capacity(sizes.len());
    for (u, &r) in sizes.iter().enumerate() {
        let mut buckets: Vec<Vec<T>> = vec![Vec::new(); r];
        for c in 0..total {
            let lc = prior.log_conditional(sizes, &marg, u, c);
            if lc == f64::NEG_INFINITY {
                continue;
            }
            buckets[config_digits(sizes, c)[u]].push(lit::<T>(lc) + g.log[c]);
        }
        let log = DVector::from_fn(r, |i, _| {
            if buckets[i].is_empty() {
                neg_inf()
            } else {
                log_sum_exp(buckets[i].iter().copied())
            }
        });
        out.push(VecPotential::from_log(log));
    }
    Ok(out)
}

/// Finite-state edge with several parents; the kernel's rows are indexed by
/// mixed-radix parent configurations.
#[derive(Clone, Debug)]
pub struct MultiFiniteKernel<T: Real> {
    pub parent_states: Vec<usize>,
    pub kernel: FiniteKernel<T>,
    pub prior: Option<FinitePrior>,
}

impl<T: Real> MultiFiniteKernel<T> {
    pub fn new(parent_states: Vec<usize>, kernel: FiniteKernel<T>, prior: Option<FinitePrior>) -> Result<Self> {
        if parent_states.is_empty() || parent_states.contains(&0) {
            return Err(Error::Validation("multi-parent edges need nonempty parent state spaces".into()));
        }
        let rows: usize = parent_states.iter().product();
        if kernel.source_states() != rows {
            return Err(Error::Dimension(format!(
                "joint kernel has {} rows for {rows} parent configurations",
                kernel.source_states()
            )));
        }
        if let Some(p) = &prior {
            p.validate(&parent_states)?;
        }
        Ok(Self { parent_states, kernel, prior })
    }

    pub fn parents(&self) -> usize {
        self.parent_states.len()
    }

    /// Per-parent messages; a single parent receives the ordinary pullback.
    pub fn pullback(&self, g: &VecPotential<T>, default_prior: Option<&FinitePrior>) -> Result<Vec<VecPotential<T>>> {
        let joint = self.kernel.pullback(g)?;
        if self.parents() == 1 {
            return Ok(vec![joint]);
        }
        let prior = self.prior.as_ref().or(default_prior).ok_or_else(|| {
            Error::Validation("multi-parent edge needs a parent prior: none given and none derivable".into())
        })?;
        factorize_finite(&joint, &self.parent_states, prior)
    }

    pub fn guided_sample(&self, g: &VecPotential<T>, x: &[usize], rng: &mut dyn rand::RngCore) -> Result<usize> {
        let c = config_index(&self.parent_states, x)?;
        self.kernel.guided_sample(g, &c, rng)
    }

    pub fn log_weight(&self, g: &VecPotential<T>, messages: &[VecPotential<T>], x: &[usize]) -> Result<T> {
        let c = config_index(&self.parent_states, x)?;
        if self.parents() == 1 {
            return self.kernel.log_weight(g, &messages[0], &c);
        }
        let num = crate::finite::log_row_dot(&self.kernel.forward_matrix().row(c).iter().copied().collect::<Vec<_>>(), &g.log);
        dag_log_weight(num, messages.iter().zip(x).map(|(m, &xi)| m.log_at(xi)))
    }
}

/// `num - Σ log g_u`, with a zero factor giving `-∞`.
pub fn dag_log_weight<T: Real>(num: T, factors: impl IntoIterator<Item = Result<T>>) -> Result<T> {
    let mut den = T::zero();
    for f in factors {
        let f = f?;
        if f == neg_inf() {
            return Ok(neg_inf());
        }
        den += f;
    }
    if num == neg_inf() {
        return Ok(neg_inf());
    }
    Ok(num - den)
}

/// Gaussian parent prior `N(mean, cov)` over the stacked parent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussPrior<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

impl<T: Real> GaussPrior<T> {
    /// Block-diagonal prior from independent marginals.
    pub fn product(marginals: &[(DVector<T>, DMatrix<T>)]) -> Self {
        let d: usize = marginals.iter().map(|(m, _)| m.len()).sum();
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        let mut off = 0;
        for (m, p) in marginals {
            let k = m.len();
            mean.rows_mut(off, k).copy_from(m);
            cov.view_mut((off, off), (k, k)).copy_from(p);
            off += k;
        }
        Self { mean, cov }
    }
}

fn select<T: Real>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn select_vec<T: Real>(v: &DVector<T>, rows: &[usize]) -> DVector<T> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// Factorizes a Gaussian potential on the stacked parent vector.
///
/// With `X_z | X_u = x ~ N(A x + b, S)` under the prior, the factor for
/// parent `u` is again of the form `(c, F, H)`.
pub fn factorize_gaussian<T: Real>(
    g: &GaussPotential<T>,
    dims: &[usize],
    prior: &GaussPrior<T>,
) -> Result<Vec<GaussPotential<T>>> {
    let d: usize = dims.iter().sum();
    if g.dim() != d || prior.mean.len() != d || prior.cov.nrows() != d || prior.cov.ncols() != d {
        return Err(Error::Dimension(format!(
            "stacked parent dimension {d}, potential {}, prior {}",
            g.dim(),
            prior.mean.len()
        )));
    }
    let mut out = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &du in dims {
        let u_idx: Vec<usize> = (off..off + du).collect();
        let z_idx: Vec<usize> = (0..d).filter(|i| !(off..off + du).contains(i)).collect();
        off += du;
        if z_idx.is_empty() {
            out.push(g.clone());
            continue;
        }
        let s_uu = select(&prior.cov, &u_idx, &u_idx);
        let s_zu = select(&prior.cov, &z_idx, &u_idx);
        let s_zz = select(&prior.cov, &z_idx, &z_idx);
        let ch_uu = cholesky(&s_uu, "parent prior marginal covariance")?;
        let a = ch_uu.solve(&s_zu.transpose()).transpose();
        let b = select_vec(&prior.mean, &z_idx) - &a * select_vec(&prior.mean, &u_idx);
        let s = symmetrize(&(&s_zz - &a * s_zu.transpose()));
        let ch_s = cholesky(&s, "parent prior conditional covariance")?;
        let s_inv = ch_s.inverse();

        let h_uu = select(&g.h, &u_idx, &u_idx);
        let h_zu = select(&g.h, &z_idx, &u_idx);
        let h_zz = select(&g.h, &z_idx, &z_idx);
        let f_u = select_vec(&g.f, &u_idx);
        let f_z = select_vec(&g.f, &z_idx);

        let p = symmetrize(&(&s_inv + &h_zz));
        let ch_p = cholesky(&p, "factorization precision S^-1 + H_zz")?;
        let w0 = &f_z + &s_inv * &b;
        let w = &s_inv * &a - &h_zu;
        let p_inv_w0 = ch_p.solve(&w0);
        let p_inv_w = ch_p.solve(&w);
        let s_inv_a = &s_inv * &a;
        let s_inv_b = &s_inv * &b;

        let h = symmetrize(&(h_uu - w.transpose() * &p_inv_w + a.transpose() * &s_inv_a));
        let f = f_u + w.transpose() * &p_inv_w0 - a.transpose() * &s_inv_b;
        let half = lit::<T>(0.5);
        let c = g.c - half * log_det_cholesky(&ch_s) - half * log_det_cholesky(&ch_p) + half * w0.dot(&p_inv_w0)
            - half * b.dot(&s_inv_b);
        out.push(GaussPotential { c, f, h });
    }
    Ok(out)
}

/// Gaussian edge whose source is the stacked vector of all parents.
#[derive(Clone, Debug)]
pub struct MultiGaussKernel<T: Real> {
    pub parent_dims: Vec<usize>,
    pub kernel: GaussKernel<T>,
    pub prior: Option<GaussPrior<T>>,
}

impl<T: Real> MultiGaussKernel<T> {
    pub fn new(parent_dims: Vec<usize>, kernel: GaussKernel<T>, prior: Option<GaussPrior<T>>) -> Result<Self> {
        if parent_dims.is_empty() || parent_dims.contains(&0) {
            return Err(Error::Validation("multi-parent edges need nonempty parent state spaces".into()));
        }
        let d: usize = parent_dims.iter().sum();
        if kernel.aux.source_dim() != d {
            return Err(Error::Dimension(format!(
                "joint kernel source dimension {} for stacked parent dimension {d}",
                kernel.aux.source_dim()
            )));
        }
        Ok(Self { parent_dims, kernel, prior })
    }

    pub fn parents(&self) -> usize {
        self.parent_dims.len()
    }

    pub fn stack(&self, xs: &[&DVector<T>]) -> Result<DVector<T>> {
        if xs.len() != self.parents() || xs.iter().zip(&self.parent_dims).any(|(x, &d)| x.len() != d) {
            return Err(Error::Dimension("parent states do not match the edge's parent dimensions".into()));
        }
        let d: usize = self.parent_dims.iter().sum();
        let mut out = DVector::zeros(d);
        let mut off = 0;
        for x in xs {
            out.rows_mut(off, x.len()).copy_from(x);
            off += x.len();
        }
        Ok(out)
    }

    pub fn pullback(&self, g: &GaussPotential<T>, default_prior: Option<&GaussPrior<T>>) -> Result<Vec<GaussPotential<T>>> {
        let joint = self.kernel.pullback(g)?;
        if self.parents() == 1 {
            return Ok(vec![joint]);
        }
        let prior = self.prior.as_ref().or(default_prior).ok_or_else(|| {
            Error::Validation("multi-parent edge needs a parent prior: none given and none derivable".into())
        })?;
        factorize_gaussian(&joint, &self.parent_dims, prior)
    }

    pub fn log_weight(&self, g: &GaussPotential<T>, messages: &[GaussPotential<T>], xs: &[&DVector<T>]) -> Result<T> {
        let x = self.stack(xs)?;
        if self.parents() == 1 {
            return self.kernel.log_weight(g, &messages[0], &x);
        }
        let num = self.kernel.log_forward_integral(g, &x)?;
        dag_log_weight(num, messages.iter().zip(xs).map(|(m, x)| m.log_value(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::LinearGauss;
    use approx::assert_relative_eq;

    #[test]
    fn mixed_radix_round_trip() {
        let sizes = [2, 3, 4];
        for c in 0..24 {
            assert_eq!(config_index(&sizes, &config_digits(&sizes, c)).unwrap(), c);
        }
        assert_eq!(config_index(&sizes, &[1, 0, 0]).unwrap(), 12);
        assert!(config_index(&sizes, &[0, 3, 0]).is_err());
    }

    #[test]
    fn finite_factorization_matches_enumeration() {
        let sizes = [2, 2];
        let g = VecPotential::from_values(&[0.3, 0.9, 0.5, 0.2]).unwrap();
        let joint = vec![0.1, 0.4, 0.3, 0.2];
        let fs = factorize_finite(&g, &sizes, &FinitePrior::Joint(joint.clone())).unwrap();
        // E[g | X0 = 0] = (0.1*0.3 + 0.4*0.9)/0.5
        assert_relative_eq!(fs[0].values()[0], (0.1 * 0.3 + 0.4 * 0.9) / 0.5, epsilon = 1e-14);
        assert_relative_eq!(fs[0].values()[1], (0.3 * 0.5 + 0.2 * 0.2) / 0.5, epsilon = 1e-14);
        assert_relative_eq!(fs[1].values()[0], (0.1 * 0.3 + 0.3 * 0.5) / 0.4, epsilon = 1e-14);
        assert_relative_eq!(fs[1].values()[1], (0.4 * 0.9 + 0.2 * 0.2) / 0.6, epsilon = 1e-14);
    }

    #[test]
    fn already_factorized_potential_is_recovered() {
        let g1 = [0.2, 0.7];
        let g2 = [0.5, 0.1, 0.4];
        let vals: Vec<f64> = (0..6).map(|c| g1[c / 3] * g2[c % 3]).collect();
        let g = VecPotential::from_values(&vals).unwrap();
        let p2 = vec![0.2, 0.5, 0.3];
        let prior = FinitePrior::Product(vec![vec![0.6, 0.4], p2.clone()]);
        let fs = factorize_finite(&g, &[2, 3], &prior).unwrap();
        let m2: f64 = g2.iter().zip(&p2).map(|(a, b)| a * b).sum();
        for i in 0..2 {
            assert_relative_eq!(fs[0].values()[i], g1[i] * m2, epsilon = 1e-14);
        }
    }

    #[test]
    fn gaussian_factorization_matches_numeric_integration() {
        // one-dimensional parents; compare against a fine Riemann sum
        let g = GaussPotential::new(0.1, DVector::from_vec(vec![0.4, -0.3]), DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8])).unwrap();
        let prior = GaussPrior {
            mean: DVector::from_vec(vec![0.2, -0.5]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.7]),
        };
        let fs = factorize_gaussian(&g, &[1, 1], &prior).unwrap();
        let x = 0.35;
        // X1 | X0 = x ~ N(-0.5 + 0.4 (x - 0.2), 0.7 - 0.16)
        let m = -0.5 + 0.4 * (x - 0.2);
        let s: f64 = 0.7 - 0.16;
        let n = 200_000;
        let (lo, hi) = (m - 12.0 * s.sqrt(), m + 12.0 * s.sqrt());
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let z = lo + (i as f64 + 0.5) * h;
            let dens = (-(z - m) * (z - m) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt();
            let gv = g.log_value(&DVector::from_vec(vec![x, z])).unwrap().exp();
            acc += gv * dens * h;
        }
        let got = fs[0].log_value(&DVector::from_vec(vec![x])).unwrap();
        assert_relative_eq!(got, acc.ln(), epsilon = 1e-9);
    }

    #[test]
    fn single_parent_edges_delegate() {
        let k = FiniteKernel::exact(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7])).unwrap();
        let m = MultiFiniteKernel::new(vec![2], k.clone(), None).unwrap();
        let g = VecPotential::from_values(&[0.2, 0.6]).unwrap();
        let msgs = m.pullback(&g, None).unwrap();
        assert_eq!(msgs[0], k.pullback(&g).unwrap());
        let aux = LinearGauss::new(DMatrix::identity(1, 1), DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let gk = MultiGaussKernel::new(vec![1], GaussKernel::linear(aux), None).unwrap();
        let gp = GaussPotential::constant(1, 0.0);
        assert_eq!(gk.pullback(&gp, None).unwrap()[0], gk.kernel.pullback(&gp).unwrap());
        let two = MultiFiniteKernel::new(vec![2, 2], FiniteKernel::exact(DMatrix::from_element(4, 2, 0.5)).unwrap(), None).unwrap();
        assert!(matches!(two.pullback(&g, None), Err(Error::Validation(_))));
    }
}
