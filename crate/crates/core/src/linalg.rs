//! Dense linear-algebra helpers shared by the Gaussian, SDE and CTMC code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{is_finite, lit, neg_inf, to_f64, Real};

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

pub fn cholesky<T: Real>(m: &DMatrix<T>, context: &str) -> Result<Cholesky<T, Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{context}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| {
        Error::numeric(
            context,
            format!(
                "matrix not positive definite (condition estimate {:.3e})",
                condition_number(m)
            ),
        )
    })
}

pub fn log_det_cholesky<T: Real>(ch: &Cholesky<T, Dyn>) -> T {
    let l = ch.l_dirty();
    let mut s = T::zero();
    for i in 0..l.nrows() {
        s += l[(i, i)].ln();
    }
    s + s
}

/// Ratio of the largest to smallest absolute eigenvalue of the symmetric part.
pub fn condition_number<T: Real>(m: &DMatrix<T>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for v in eig.eigenvalues.iter() {
        let a = to_f64(*v).abs();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn is_positive_definite<T: Real>(m: &DMatrix<T>) -> bool {
    m.is_square() && Cholesky::new(symmetrize(m)).is_some()
}

/// `log N(x; mean, cov)`.
pub fn log_normal_density<T: Real>(x: &DVector<T>, mean: &DVector<T>, cov: &DMatrix<T>) -> Result<T> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(Error::Dimension(format!(
            "normal density: x {} mean {} cov {}x{}",
            x.len(),
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let ch = cholesky(cov, "normal density covariance")?;
    let r = x - mean;
    let z = ch.l_dirty().solve_lower_triangular(&r).ok_or_else(|| {
        Error::numeric("normal density", "triangular solve failed")
    })?;
    let d: T = lit(x.len() as f64);
    Ok(-(d * lit::<T>(std::f64::consts::TAU.ln()) + log_det_cholesky(&ch) + z.norm_squared()) * lit::<T>(0.5))
}

pub fn solve<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, context: &str) -> Result<DMatrix<T>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::numeric(context, "singular linear system"))
}

pub fn solve_vec<T: Real>(a: &DMatrix<T>, b: &DVector<T>, context: &str) -> Result<DVector<T>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::numeric(context, "singular linear system"))
}

/// `log |det a|`, failing for singular or negative-determinant matrices.
pub fn log_det_positive<T: Real>(a: &DMatrix<T>, context: &str) -> Result<T> {
    let lu = a.clone().lu();
    let det = lu.determinant();
    if det > T::zero() && is_finite(det) {
        Ok(det.ln())
    } else {
        Err(Error::numeric(
            context,
            format!("determinant {:.3e} is not positive", to_f64(det)),
        ))
    }
}

pub fn log_sum_exp<T: Real>(xs: impl IntoIterator<Item = T>) -> T {
    let v: Vec<T> = xs.into_iter().collect();
    let m = v.iter().copied().fold(neg_inf::<T>(), |a, b| a.max(b));
    if !is_finite(m) {
        return m;
    }
    let s = v.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

pub fn one_norm<T: Real>(a: &DMatrix<T>) -> T {
    let mut best = T::zero();
    for j in 0..a.ncols() {
        let s = a.column(j).iter().fold(T::zero(), |acc, x| acc + x.abs());
        best = best.max(s);
    }
    best
}

/// Dense matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !a.is_square() {
        return Err(Error::Dimension("expm of non-square matrix".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let theta13 = 5.371920351148152;
    let norm = to_f64(one_norm(a));
    if !norm.is_finite() {
        return Err(Error::numeric("expm", "non-finite matrix entries"));
    }
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * lit::<T>(0.5f64.powi(s));
    let id = DMatrix::<T>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = |i: usize| lit::<T>(B[i]);
    let u_inner = &a6 * (&a6 * b(13) + &a4 * b(11) + &a2 * b(9))
        + &a6 * b(7)
        + &a4 * b(5)
        + &a2 * b(3)
        + &id * b(1);
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b(12) + &a4 * b(10) + &a2 * b(8))
        + &a6 * b(6)
        + &a4 * b(4)
        + &a2 * b(2)
        + &id * b(0);
    let mut r = solve(&(&v - &u), &(&v + &u), "expm Pade denominator")?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Action `exp(q t) v` of a rate matrix on a vector by uniformization.
///
/// `q` must have nonnegative off-diagonal entries; the series is truncated
/// once the remaining Poisson mass drops below `1e-17`.
pub fn expm_action_uniformized<T: Real>(q: &DMatrix<T>, t: T, v: &DVector<T>) -> DVector<T> {
    let n = q.nrows();
    let mut rate = T::zero();
    for i in 0..n {
        rate = rate.max(-q[(i, i)]);
    }
    if rate <= T::zero() || t <= T::zero() {
        return v.clone();
    }
    let p = DMatrix::<T>::identity(n, n) + q / rate;
    let total = to_f64(rate * t);
    let chunks = (total / 20.0).ceil().max(1.0) as usize;
    let mu = total / chunks as f64;
    let mut out = v.clone();
    for _ in 0..chunks {
        let mut weight = (-mu).exp();
        let mut mass = weight;
        let mut term = out.clone();
        let mut acc = &term * lit::<T>(weight);
        let mut k = 0usize;
        while 1.0 - mass > 1e-17 && k < 10_000 {
            k += 1;
            term = &p * term;
            weight *= mu / k as f64;
            mass += weight;
            acc += &term * lit::<T>(weight);
            if (k as f64) > mu && weight < 1e-300 {
                break;
            }
        }
        out = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_diagonal_matches_scalar_exponentials() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 0.5, 12.0]));
        let e = expm(&a).unwrap();
        for (i, v) in [-3.0f64, 0.5, 12.0].iter().enumerate() {
            assert_relative_eq!(e[(i, i)], v.exp(), max_relative = 1e-13);
        }
    }

    #[test]
    fn expm_of_nilpotent_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let e = expm(&a).unwrap();
        assert_relative_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn uniformization_matches_dense_expm() {
        let q = DMatrix::from_row_slice(3, 3, &[-2.0, 1.5, 0.5, 0.3, -0.4, 0.1, 4.0, 1.0, -5.0]);
        let v = DVector::from_vec(vec![0.2, 1.0, -0.7]);
        for &t in &[0.01, 0.7, 9.0, 60.0] {
            let dense = expm(&(&q * t)).unwrap() * &v;
            let unif = expm_action_uniformized(&q, t, &v);
            assert_relative_eq!(dense, unif, max_relative = 1e-10, epsilon = 1e-13);
        }
    }

    #[test]
    fn log_normal_density_standard() {
        let x = DVector::from_vec(vec![0.0]);
        let v = log_normal_density(&x, &x, &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(v, -0.5 * std::f64::consts::TAU.ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_sum_exp_handles_all_neg_infinity() {
        let v = log_sum_exp([f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(v, f64::NEG_INFINITY);
        assert_relative_eq!(log_sum_exp([1000.0, 1000.0]), 1000.0 + 2f64.ln());
    }
}
