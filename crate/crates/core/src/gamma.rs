//! Gamma-increment line graphs bridged to an observed terminal value.
//!
//! An edge moves `x` to `x + Δ` with `Δ ~ Gamma(α, β(x))`. Potentials have
//! the form `g(y) = ψ(x_v - y; A, β̃)` where `ψ` is the Gamma density and
//! `x_v` the observed endpoint. This family is not closed under fusion, so
//! it is restricted to line graphs.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::potential::{GuidedKernel, Potential};

/// Rejection loops give up after this many proposals.
pub const MAX_REJECTION_TRIES: usize = 1_000_000;

/// Number of Gauss–Jacobi nodes used for deterministic weights.
pub const QUADRATURE_NODES: usize = 32;

/// `log ψ(z; shape, rate)`, `-inf` for `z <= 0`.
pub fn log_gamma_density(z: f64, shape: f64, rate: f64) -> f64 {
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() + (shape - 1.0) * z.ln() - rate * z - ln_gamma(shape)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaPotential {
    pub shape: f64,
    pub rate: f64,
    pub anchor: f64,
}

impl GammaPotential {
    pub fn new(shape: f64, rate: f64, anchor: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && anchor.is_finite()) {
            return Err(Error::Validation(format!(
                "Gamma potential needs positive shape and rate, got ({shape}, {rate})"
            )));
        }
        Ok(Self { shape, rate, anchor })
    }

    pub fn log_value(&self, y: f64) -> f64 {
        log_gamma_density(self.anchor - y, self.shape, self.rate)
    }
}

impl Potential for GammaPotential {
    type State = f64;
    type Scalar = f64;

    fn log_eval(&self, x: &f64) -> Result<f64> {
        Ok(self.log_value(*x))
    }

    fn fuse(gs: &[Self]) -> Result<Self> {
        match gs {
            [g] => Ok(g.clone()),
            [] => Err(Error::Validation("fusion of an empty list".into())),
            _ => Err(Error::Unsupported(
                "Gamma potentials are not closed under fusion; branching is not allowed".into(),
            )),
        }
    }
}

/// State-dependent increment rate `β(x)`.
#[derive(Clone)]
pub enum RateMap {
    Constant(f64),
    /// `base * (1 + amplitude * sin x)`.
    Sinusoidal { base: f64, amplitude: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for RateMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateMap::Constant(b) => write!(f, "Constant({b})"),
            RateMap::Sinusoidal { base, amplitude } => write!(f, "Sinusoidal({base}, {amplitude})"),
            RateMap::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl RateMap {
    pub fn eval(&self, x: f64) -> Result<f64> {
        let r = match self {
            RateMap::Constant(b) => *b,
            RateMap::Sinusoidal { base, amplitude } => base * (1.0 + amplitude * x.sin()),
            RateMap::Custom(f) => f(x),
        };
        if r > 0.0 && r.is_finite() {
            Ok(r)
        } else {
            Err(Error::Domain(format!("increment rate {r} at x = {x} is not positive")))
        }
    }
}

/// How `E exp(-ξ Z)`, `Z ~ Beta(α, A)`, is evaluated in the weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightMethod {
    Quadrature,
    MonteCarlo { draws: usize },
}

#[derive(Clone, Debug)]
pub struct GammaKernel {
    pub shape: f64,
    pub rate: RateMap,
    pub aux_rate: f64,
    pub method: WeightMethod,
}

impl GammaKernel {
    pub fn new(shape: f64, rate: RateMap, aux_rate: f64) -> Result<Self> {
        if !(shape > 0.0 && aux_rate > 0.0) {
            return Err(Error::Validation(format!(
                "Gamma kernel needs positive shape and auxiliary rate, got ({shape}, {aux_rate})"
            )));
        }
        Ok(Self { shape, rate, aux_rate, method: WeightMethod::Quadrature })
    }

    pub fn with_method(mut self, method: WeightMethod) -> Self {
        self.method = method;
        self
    }

    /// Leaf message for an observed endpoint.
    pub fn leaf_potential(&self, anchor: f64) -> Result<GammaPotential> {
        GammaPotential::new(self.shape, self.aux_rate, anchor)
    }

    /// `α log(β(x)/β̃) - (β(x) - β̃)(x_v - x)`.
    pub fn leaf_log_weight(&self, anchor: f64, x: f64) -> Result<f64> {
        if x >= anchor {
            return Err(Error::Domain(format!("state {x} is not below the observed endpoint {anchor}")));
        }
        let b = self.rate.eval(x)?;
        Ok(self.shape * (b / self.aux_rate).ln() - (b - self.aux_rate) * (anchor - x))
    }

    fn tilt(&self, g: &GammaPotential, x: f64) -> Result<(f64, f64)> {
        if x >= g.anchor {
            return Err(Error::Domain(format!(
                "state {x} is not below the observed endpoint {}",
                g.anchor
            )));
        }
        let b = self.rate.eval(x)?;
        Ok((b, (b - self.aux_rate) * (g.anchor - x)))
    }

    fn check_rate(&self, g: &GammaPotential) -> Result<()> {
        if (g.rate - self.aux_rate).abs() > 1e-14 * self.aux_rate {
            return Err(Error::FamilyMismatch(format!(
                "potential rate {} differs from auxiliary rate {}",
                g.rate, self.aux_rate
            )));
        }
        Ok(())
    }

    /// Guided step as a deterministic function of an ExpBeta draw `z`.
    pub fn step_from_fraction(&self, g: &GammaPotential, x: f64, z: f64) -> f64 {
        x + z * (g.anchor - x)
    }

    /// Weight with `E exp(-ξ Z)` estimated from `draws` Beta samples.
    pub fn log_weight_monte_carlo(
        &self,
        g: &GammaPotential,
        x: f64,
        draws: usize,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        self.check_rate(g)?;
        let (b, xi) = self.tilt(g, x)?;
        let beta = Beta::new(self.shape, g.shape)
            .map_err(|e| Error::Validation(format!("Beta({}, {}): {e}", self.shape, g.shape)))?;
        let mut acc = 0.0;
        for _ in 0..draws.max(1) {
            let z: f64 = beta.sample(rng);
            acc += (-xi * z).exp();
        }
        Ok(self.shape * (b / self.aux_rate).ln() + (acc / draws.max(1) as f64).ln())
    }

    /// Weight using Gauss–Jacobi quadrature for the Beta expectation.
    pub fn log_weight_quadrature(&self, g: &GammaPotential, x: f64) -> Result<f64> {
        self.check_rate(g)?;
        let (b, xi) = self.tilt(g, x)?;
        Ok(self.shape * (b / self.aux_rate).ln() + log_beta_laplace(self.shape, g.shape, xi)?)
    }
}

/// `log E exp(-ξ Z)` for `Z ~ Beta(p, q)` by Gauss–Jacobi quadrature.
pub fn log_beta_laplace(p: f64, q: f64, xi: f64) -> Result<f64> {
    let (nodes, weights) = beta_quadrature(p, q, QUADRATURE_NODES)?;
    Ok(log_sum_exp(
        nodes.iter().zip(&weights).map(|(z, w)| w.ln() - xi * z),
    ))
}

/// Nodes on `(0, 1)` and normalized weights integrating against `Beta(p, q)`.
///
/// Golub–Welsch on the Jacobi matrix with `a = q - 1`, `b = p - 1`, mapped by
/// `z = (1 + t)/2`.
pub fn beta_quadrature(p: f64, q: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(p > 0.0 && q > 0.0) || n == 0 {
        return Err(Error::Validation(format!("Beta quadrature with parameters ({p}, {q})")));
    }
    let a = q - 1.0;
    let b = p - 1.0;
    let s = a + b;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        jac[(k, k)] = if k == 0 {
            (b - a) / (s + 2.0)
        } else {
            (b * b - a * a) / ((2.0 * kf + s) * (2.0 * kf + s + 2.0))
        };
        if k + 1 < n {
            let j = (k + 1) as f64;
            let beta_k = if k == 0 {
                4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + s).powi(2) * (3.0 + s))
            } else {
                4.0 * j * (j + a) * (j + b) * (j + s)
                    / ((2.0 * j + s).powi(2) * (2.0 * j + s + 1.0) * (2.0 * j + s - 1.0))
            };
            let off = beta_k.sqrt();
            jac[(k, k + 1)] = off;
            jac[(k + 1, k)] = off;
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| ((1.0 + eig.eigenvalues[i]) / 2.0, eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::numeric("Gauss–Jacobi rule", "degenerate weights"));
    }
    Ok((
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    ))
}

/// Draw from the density `∝ z^{γ1-1} (1-z)^{γ2-1} e^{-λz}` on `(0, 1)`.
pub fn expbeta_sample(g1: f64, g2: f64, lambda: f64, rng: &mut dyn RngCore) -> Result<f64> {
    let beta = Beta::new(g1, g2).map_err(|e| Error::Validation(format!("Beta({g1}, {g2}): {e}")))?;
    // sup of e^{-λz} on (0,1) is attained at an endpoint
    let log_m = (-lambda).max(0.0);
    for _ in 0..MAX_REJECTION_TRIES {
        let z: f64 = beta.sample(rng);
        let u: f64 = rng.random();
        if u.ln() < -lambda * z - log_m {
            return Ok(z);
        }
    }
    Err(Error::Sampling(format!(
        "ExpBeta({g1}, {g2}, {lambda}) rejection sampler exceeded {MAX_REJECTION_TRIES} proposals"
    )))
}

impl GuidedKernel for GammaKernel {
    type Potential = GammaPotential;

    fn pullback(&self, g: &GammaPotential) -> Result<GammaPotential> {
        self.check_rate(g)?;
        GammaPotential::new(g.shape + self.shape, g.rate, g.anchor)
    }

    fn guided_sample(&self, g: &GammaPotential, x: &f64, rng: &mut dyn RngCore) -> Result<f64> {
        let (_, xi) = self.tilt(g, *x)?;
        let z = expbeta_sample(self.shape, g.shape, xi, rng)?;
        Ok(self.step_from_fraction(g, *x, z))
    }

    fn log_weight(&self, g: &GammaPotential, _g_edge: &GammaPotential, x: &f64) -> Result<f64> {
        // only the deterministic path is reachable without a random stream
        self.log_weight_quadrature(g, *x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pullback_adds_shapes() {
        let k = GammaKernel::new(3.0, RateMap::Constant(1.0), 1.0).unwrap();
        let g = GammaPotential::new(2.0, 1.0, 5.0).unwrap();
        let p = k.pullback(&g).unwrap();
        assert_eq!((p.shape, p.rate, p.anchor), (5.0, 1.0, 5.0));
        let p3 = k.pullback(&k.pullback(&p).unwrap()).unwrap();
        assert_eq!(p3.shape, 11.0);
        let tiny = GammaKernel::new(1e-9, RateMap::Constant(1.0), 1.0).unwrap();
        assert_relative_eq!(tiny.pullback(&g).unwrap().shape, 2.0, epsilon = 1e-8);
        let other = GammaKernel::new(3.0, RateMap::Constant(2.0), 2.0).unwrap();
        assert!(matches!(other.pullback(&g), Err(Error::FamilyMismatch(_))));
    }

    #[test]
    fn fusion_is_rejected() {
        let g = GammaPotential::new(2.0, 1.0, 5.0).unwrap();
        assert_eq!(GammaPotential::fuse(std::slice::from_ref(&g)).unwrap(), g);
        assert!(matches!(GammaPotential::fuse(&[g.clone(), g]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn quadrature_integrates_polynomials_exactly() {
        let (z, w) = beta_quadrature(2.5, 1.5, QUADRATURE_NODES).unwrap();
        let mean: f64 = z.iter().zip(&w).map(|(z, w)| z * w).sum();
        let second: f64 = z.iter().zip(&w).map(|(z, w)| z * z * w).sum();
        assert_relative_eq!(mean, 2.5 / 4.0, epsilon = 1e-13);
        assert_relative_eq!(second, 2.5 * 3.5 / (4.0 * 5.0), epsilon = 1e-13);
        assert!(z.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn weight_vanishes_for_matching_rate() {
        let k = GammaKernel::new(1.5, RateMap::Constant(2.0), 2.0).unwrap();
        let g = GammaPotential::new(2.0, 2.0, 3.0).unwrap();
        assert!(k.log_weight_quadrature(&g, 1.0).unwrap().abs() < 1e-14);
        assert!(k.leaf_log_weight(3.0, 1.0).unwrap().abs() < 1e-14);
    }

    #[test]
    fn weight_first_order_expansion() {
        let (alpha, a, beta_t) = (1.5, 2.5, 1.0);
        let k = GammaKernel::new(alpha, RateMap::Constant(beta_t * (1.0 + 1e-4)), beta_t).unwrap();
        let g = GammaPotential::new(a, beta_t, 2.0).unwrap();
        let x = 1.0;
        let xi = 1e-4 * beta_t * (2.0 - x);
        let approx = alpha * (1.0 + 1e-4f64).ln() - xi * alpha / (alpha + a);
        assert_relative_eq!(k.log_weight_quadrature(&g, x).unwrap(), approx, epsilon = 1e-9);
    }

    #[test]
    fn expbeta_mean_decreases_with_tilt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means: Vec<f64> = [0.0, 1.0, 5.0]
            .iter()
            .map(|&l| (0..20_000).map(|_| expbeta_sample(2.0, 2.0, l, &mut rng).unwrap()).sum::<f64>() / 20_000.0)
            .collect();
        assert!(means[0] > means[1] && means[1] > means[2]);
        assert!((means[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn guided_sample_stays_inside_bridge() {
        let k = GammaKernel::new(0.7, RateMap::Sinusoidal { base: 1.0, amplitude: 0.5 }, 1.0).unwrap();
        let g = GammaPotential::new(0.4, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let y = k.guided_sample(&g, &0.5, &mut rng).unwrap();
            assert!(y > 0.5 && y < 2.0);
        }
        assert!(matches!(k.guided_sample(&g, &2.5, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn large_shape_pins_increment() {
        let k = GammaKernel::new(1.0, RateMap::Constant(1.0), 1.0).unwrap();
        let g = GammaPotential::new(1e3, 1.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5000;
        let mean = (0..n).map(|_| k.guided_sample(&g, &0.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 10.0 / 1001.0).abs() < 3e-3);
    }
}
