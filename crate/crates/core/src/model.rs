//! Declarative TOML model files.
//!
//! A file names its vertices, declares free parameters with priors, and
//! lists one `[[edge]]` per non-root vertex. Any numeric entry of an edge may
//! be a number or a parameter expression `[-][k*]name`, so the same file
//! yields a [`Model`] for every parameter vector.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::agent::SisKernel;
use crate::chebyshev::WrightFisherEdge;
use crate::ctmc::{AuxRates, CtmcEdge};
use crate::dag::{FinitePrior, MultiFiniteKernel, MultiGaussKernel};
use crate::engine::{EdgeKernel, Model, State};
use crate::error::{Error, Result};
use crate::finite::FiniteKernel;
use crate::gamma::{GammaKernel, RateMap};
use crate::gaussian::{GaussKernel, LinearGauss};
use crate::graph::Graph;
use crate::mcmc::{ModelBuilder, ObsVarianceUpdate, Parameter, Prior};
use crate::sde::{Dispersion, Drift, LinearAux, SdeEdge, SdeSpec};

/// A number or a parameter expression such as `theta0`, `-theta0` or `0.5*sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Expr(String),
}

impl From<f64> for Scalar {
    fn from(x: f64) -> Self {
        Scalar::Number(x)
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Expr(s.to_string())
    }
}

/// Parsed `[-][k*]name`.
#[derive(Clone, Debug, PartialEq)]
struct Expr {
    coef: f64,
    name: String,
}

fn parse_expr(s: &str) -> Result<Expr> {
    let t = s.trim();
    let (sign, rest) = match t.strip_prefix('-') {
        Some(r) => (-1.0, r.trim_start()),
        None => (1.0, t),
    };
    let (coef, name) = match rest.split_once('*') {
        Some((k, n)) => {
            let k: f64 = k
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad coefficient in expression {s:?}")))?;
            (k, n.trim())
        }
        None => (1.0, rest),
    };
    let ok = name.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_alphanumeric() || c == '_');
    if !ok {
        return Err(Error::Parse(format!("expression {s:?} is not of the form [-][k*]name")));
    }
    Ok(Expr { coef: sign * coef, name: name.to_string() })
}

/// Parameter values by name, used while instantiating.
struct Env<'a> {
    values: HashMap<&'a str, f64>,
}

impl Env<'_> {
    fn scalar(&self, s: &Scalar, field: &str) -> Result<f64> {
        match s {
            Scalar::Number(x) => Ok(*x),
            Scalar::Expr(e) => {
                let e = parse_expr(e).map_err(|err| Error::Parse(format!("{field}: {err}")))?;
                let v = self
                    .values
                    .get(e.name.as_str())
                    .ok_or_else(|| Error::Parse(format!("{field}: unknown parameter {:?}", e.name)))?;
                Ok(e.coef * v)
            }
        }
    }

    fn vector(&self, v: &[Scalar], field: &str) -> Result<DVector<f64>> {
        let xs = v.iter().map(|s| self.scalar(s, field)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(xs))
    }

    fn matrix(&self, m: &[Vec<Scalar>], field: &str) -> Result<DMatrix<f64>> {
        let rows = m.len();
        let cols = m.first().map_or(0, |r| r.len());
        if rows == 0 || m.iter().any(|r| r.len() != cols) {
            return Err(Error::Parse(format!("{field}: matrix rows must be nonempty and of equal length")));
        }
        let mut out = DMatrix::zeros(rows, cols);
        for (i, r) in m.iter().enumerate() {
            for (j, s) in r.iter().enumerate() {
                out[(i, j)] = self.scalar(s, field)?;
            }
        }
        Ok(out)
    }
}

pub type Vector = Vec<Scalar>;
pub type Matrix = Vec<Vec<Scalar>>;

/// Value of a vertex, keyed by its state kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpec {
    Vector(Vector),
    Discrete(usize),
    Real(Scalar),
    Binary(Vec<bool>),
    Configuration(Vec<usize>),
}

impl StateSpec {
    fn instantiate(&self, env: &Env, field: &str) -> Result<State> {
        Ok(match self {
            StateSpec::Vector(v) => State::Vector(env.vector(v, field)?),
            StateSpec::Discrete(k) => State::Discrete(*k),
            StateSpec::Real(x) => State::Real(env.scalar(x, field)?),
            StateSpec::Binary(b) => State::Binary(b.clone()),
            StateSpec::Configuration(c) => State::Configuration(c.clone()),
        })
    }

    pub fn from_state(s: &State) -> Self {
        match s {
            State::Vector(v) => StateSpec::Vector(v.iter().map(|x| Scalar::Number(*x)).collect()),
            State::Discrete(k) => StateSpec::Discrete(*k),
            State::Real(x) => StateSpec::Real(Scalar::Number(*x)),
            State::Binary(b) => StateSpec::Binary(b.clone()),
            State::Configuration(c) => StateSpec::Configuration(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootSpec {
    #[serde(default = "default_root_name")]
    pub name: String,
    pub value: StateSpec,
}

fn default_root_name() -> String {
    "r".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub initial: f64,
    /// Random-walk step; zero keeps the parameter fixed during MCMC.
    #[serde(default)]
    pub step: f64,
    #[serde(default)]
    pub prior: Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Parents {
    One(String),
    Many(Vec<String>),
}

impl Parents {
    fn names(&self) -> Vec<&str> {
        match self {
            Parents::One(s) => vec![s.as_str()],
            Parents::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftForm {
    Linear,
    TanhLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub b: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vector>,
    pub sigma: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussAuxSpec {
    pub phi: Matrix,
    pub beta: Vector,
    pub q: Matrix,
}

/// Kernel on an edge; the `kind` key selects the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `y | x ~ N(Φx + β, Q)`, optionally guided by a different linear kernel.
    Gaussian {
        phi: Matrix,
        beta: Vector,
        q: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux: Option<GaussAuxSpec>,
    },
    Finite {
        matrix: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux: Option<Matrix>,
    },
    Ctmc {
        rates: Matrix,
        tau: Scalar,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux: Option<Matrix>,
    },
    Sde {
        drift: DriftForm,
        b: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<Vector>,
        sigma: Matrix,
        tau: Scalar,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        /// Linear auxiliary; defaults to the drift coefficients themselves.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux: Option<LinearSpec>,
    },
    Gamma {
        shape: Scalar,
        rate: Scalar,
        /// `β(x) = rate (1 + amplitude sin x)` when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amplitude: Option<Scalar>,
        aux_rate: Scalar,
    },
    /// Homogeneous SIS population on the complete contact graph.
    Sis {
        population: usize,
        lambda: Scalar,
        gamma: Scalar,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux_lambda: Option<Scalar>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux_gamma: Option<Scalar>,
    },
    SisObservation {
        rho: Scalar,
        population: usize,
    },
    WrightFisher {
        beta1: Scalar,
        beta2: Scalar,
        degree: usize,
        tau: Scalar,
    },
    Binomial {
        n: usize,
        degree: usize,
    },
    MultiFinite {
        parent_states: Vec<usize>,
        matrix: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        aux: Option<Matrix>,
        /// One marginal pmf per parent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior: Option<Matrix>,
    },
    MultiGaussian {
        parent_dims: Vec<usize>,
        phi: Matrix,
        beta: Vector,
        q: Matrix,
    },
}

impl KernelSpec {
    fn instantiate(&self, env: &Env, at: &str) -> Result<EdgeKernel> {
        let f = |name: &str| format!("{at}.{name}");
        Ok(match self {
            KernelSpec::Gaussian { phi, beta, q, aux } => {
                let fwd = LinearGauss::new(env.matrix(phi, &f("phi"))?, env.vector(beta, &f("beta"))?, env.matrix(q, &f("q"))?)?;
                match aux {
                    None => EdgeKernel::Gaussian(GaussKernel::linear(fwd)),
                    Some(a) => {
                        let aux = LinearGauss::new(
                            env.matrix(&a.phi, &f("aux.phi"))?,
                            env.vector(&a.beta, &f("aux.beta"))?,
                            env.matrix(&a.q, &f("aux.q"))?,
                        )?;
                        let m = fwd.clone();
                        let qf = fwd.q.clone();
                        EdgeKernel::Gaussian(GaussKernel::nonlinear(
                            Arc::new(move |x| m.mean(x)),
                            Arc::new(move |_| qf.clone()),
                            aux,
                        ))
                    }
                }
            }
            KernelSpec::Finite { matrix, aux } => {
                let k = env.matrix(matrix, &f("matrix"))?;
                EdgeKernel::Finite(match aux {
                    None => FiniteKernel::exact(k)?,
                    Some(a) => FiniteKernel::with_aux(k, env.matrix(a, &f("aux"))?)?,
                })
            }
            KernelSpec::Ctmc { rates, tau, aux } => {
                let q = env.matrix(rates, &f("rates"))?;
                let tau = env.scalar(tau, &f("tau"))?;
                EdgeKernel::Ctmc(match aux {
                    None => CtmcEdge::exact(q, tau)?,
                    Some(a) => CtmcEdge::new(q, AuxRates::Dense(env.matrix(a, &f("aux"))?), tau)?,
                })
            }
            KernelSpec::Sde { drift, b, beta, sigma, tau, steps, aux } => {
                let bm = env.matrix(b, &f("b"))?;
                let bv = match beta {
                    Some(v) => env.vector(v, &f("beta"))?,
                    None => DVector::zeros(bm.nrows()),
                };
                let s = env.matrix(sigma, &f("sigma"))?;
                let aux = match aux {
                    Some(a) => LinearAux::constant(
                        env.matrix(&a.b, &f("aux.b"))?,
                        match &a.beta {
                            Some(v) => env.vector(v, &f("aux.beta"))?,
                            None => DVector::zeros(bm.nrows()),
                        },
                        env.matrix(&a.sigma, &f("aux.sigma"))?,
                    ),
                    None => LinearAux::constant(bm.clone(), bv.clone(), s.clone()),
                };
                let drift = match drift {
                    DriftForm::Linear => Drift::Linear { b: bm, beta: bv },
                    DriftForm::TanhLinear => Drift::TanhLinear { b: bm, beta: bv },
                };
                let spec = SdeSpec { drift, dispersion: Dispersion::Constant(s) };
                let tau = env.scalar(tau, &f("tau"))?;
                EdgeKernel::Sde(match steps {
                    Some(n) => SdeEdge::with_steps(spec, aux, tau, *n)?,
                    None => SdeEdge::new(spec, aux, tau)?,
                })
            }
            KernelSpec::Gamma { shape, rate, amplitude, aux_rate } => {
                let r = env.scalar(rate, &f("rate"))?;
                let rate = match amplitude {
                    Some(a) => RateMap::Sinusoidal { base: r, amplitude: env.scalar(a, &f("amplitude"))? },
                    None => RateMap::Constant(r),
                };
                EdgeKernel::Gamma(GammaKernel::new(env.scalar(shape, &f("shape"))?, rate, env.scalar(aux_rate, &f("aux_rate"))?)?)
            }
            KernelSpec::Sis { population, lambda, gamma, aux_lambda, aux_gamma } => {
                let l = env.scalar(lambda, &f("lambda"))?;
                let g = env.scalar(gamma, &f("gamma"))?;
                let base = SisKernel::complete_graph(*population, l, g)?;
                let al = aux_lambda.as_ref().map(|s| env.scalar(s, &f("aux_lambda"))).transpose()?;
                let ag = aux_gamma.as_ref().map(|s| env.scalar(s, &f("aux_gamma"))).transpose()?;
                EdgeKernel::Sis(if al.is_none() && ag.is_none() {
                    base
                } else {
                    SisKernel::with_aux(
                        base.lambda.clone(),
                        base.gamma.clone(),
                        base.neighbors.clone(),
                        al.unwrap_or(base.aux_lambda),
                        ag.unwrap_or(base.aux_gamma),
                    )?
                })
            }
            KernelSpec::SisObservation { rho, population } => {
                let rho = env.scalar(rho, &f("rho"))?;
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::Validation(format!("{}: detection probability {rho} outside [0, 1]", f("rho"))));
                }
                EdgeKernel::SisObservation { rho, population: *population }
            }
            KernelSpec::WrightFisher { beta1, beta2, degree, tau } => EdgeKernel::WrightFisher(WrightFisherEdge::new(
                env.scalar(beta1, &f("beta1"))?,
                env.scalar(beta2, &f("beta2"))?,
                *degree,
                env.scalar(tau, &f("tau"))?,
            )?),
            KernelSpec::Binomial { n, degree } => EdgeKernel::Binomial { n: *n, degree: *degree },
            KernelSpec::MultiFinite { parent_states, matrix, aux, prior } => {
                let k = env.matrix(matrix, &f("matrix"))?;
                let kernel = match aux {
                    None => FiniteKernel::exact(k)?,
                    Some(a) => FiniteKernel::with_aux(k, env.matrix(a, &f("aux"))?)?,
                };
                let prior = prior
                    .as_ref()
                    .map(|ms| {
                        ms.iter()
                            .map(|row| row.iter().map(|s| env.scalar(s, &f("prior"))).collect::<Result<Vec<_>>>())
                            .collect::<Result<Vec<_>>>()
                            .map(FinitePrior::Product)
                    })
                    .transpose()?;
                EdgeKernel::MultiFinite(MultiFiniteKernel::new(parent_states.clone(), kernel, prior)?)
            }
            KernelSpec::MultiGaussian { parent_dims, phi, beta, q } => {
                let lin = LinearGauss::new(env.matrix(phi, &f("phi"))?, env.vector(beta, &f("beta"))?, env.matrix(q, &f("q"))?)?;
                EdgeKernel::MultiGaussian(MultiGaussKernel::new(parent_dims.clone(), GaussKernel::linear(lin), None)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: Parents,
    pub to: String,
    #[serde(flatten)]
    pub kernel: KernelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub vertex: String,
    pub value: StateSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsVarianceSpec {
    pub parameter: String,
    pub shape: f64,
    pub scale: f64,
}

/// Defaults for `mcmc` runs; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct McmcSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_variance: Option<ObsVarianceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub root: RootSpec,
    #[serde(default, rename = "parameter", skip_serializing_if = "Vec::is_empty")]
    pub parameters: Vec<ParameterSpec>,
    #[serde(rename = "edge")]
    pub edges: Vec<EdgeSpec>,
    #[serde(default, rename = "observation", skip_serializing_if = "Vec::is_empty")]
    pub observations: Vec<ObservationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcSpec>,
}

impl ModelSpec {
    /// Parses a model file; syntax errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Vertex names in id order: the root first, then edge targets.
    pub fn vertex_names(&self) -> Vec<&str> {
        std::iter::once(self.root.name.as_str()).chain(self.edges.iter().map(|e| e.to.as_str())).collect()
    }

    pub fn vertex_id(&self, name: &str) -> Option<usize> {
        self.vertex_names().iter().position(|n| *n == name)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.initial).collect()
    }

    pub fn mcmc_parameters(&self) -> Vec<Parameter> {
        self.parameters
            .iter()
            .map(|p| Parameter { name: p.name.clone(), initial: p.initial, step: p.step, prior: p.prior.clone() })
            .collect()
    }

    pub fn obs_variance_update(&self) -> Result<Option<ObsVarianceUpdate>> {
        let Some(ov) = self.mcmc.as_ref().and_then(|m| m.obs_variance.as_ref()) else {
            return Ok(None);
        };
        let parameter = self
            .parameters
            .iter()
            .position(|p| p.name == ov.parameter)
            .ok_or_else(|| Error::Parse(format!("mcmc.obs_variance: unknown parameter {:?}", ov.parameter)))?;
        Ok(Some(ObsVarianceUpdate { parameter, shape: ov.shape, scale: ov.scale }))
    }

    /// Name-level consistency, independent of parameter values.
    fn check(&self) -> Result<()> {
        let names = self.vertex_names();
        let mut seen = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if seen.insert(*n, i).is_some() {
                return Err(Error::Parse(format!("vertex {n:?} is declared twice")));
            }
        }
        let mut pnames = HashMap::new();
        for p in &self.parameters {
            parse_expr(&p.name).ok().filter(|e| e.coef == 1.0 && e.name == p.name).ok_or_else(|| {
                Error::Parse(format!("parameter name {:?} must be an identifier", p.name))
            })?;
            if pnames.insert(p.name.as_str(), ()).is_some() {
                return Err(Error::Parse(format!("parameter {:?} is declared twice", p.name)));
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            for p in e.from.names() {
                if !seen.contains_key(p) {
                    return Err(Error::Parse(format!("edge[{i}] ({} <- {p}): unknown parent vertex", e.to)));
                }
            }
        }
        for (i, o) in self.observations.iter().enumerate() {
            if !seen.contains_key(o.vertex.as_str()) {
                return Err(Error::Parse(format!("observation[{i}]: unknown vertex {:?}", o.vertex)));
            }
        }
        Ok(())
    }

    fn graph(&self) -> Result<Graph> {
        let n = self.edges.len() + 1;
        let mut in_edges = vec![Vec::new(); n];
        for (i, e) in self.edges.iter().enumerate() {
            in_edges[i + 1] = e
                .from
                .names()
                .iter()
                .map(|p| self.vertex_id(p).ok_or_else(|| Error::Parse(format!("unknown vertex {p:?}"))))
                .collect::<Result<_>>()?;
        }
        Graph::new(0, in_edges)
    }

    /// The model at parameter vector `theta` (in declaration order).
    pub fn instantiate(&self, theta: &[f64]) -> Result<Model> {
        if theta.len() != self.parameters.len() {
            return Err(Error::Validation(format!(
                "{} parameter values for {} declared parameters",
                theta.len(),
                self.parameters.len()
            )));
        }
        let env = Env { values: self.parameters.iter().map(|p| p.name.as_str()).zip(theta.iter().copied()).collect() };
        let graph = self.graph()?;
        let n = graph.len();
        let mut kernels = vec![None; n];
        for (i, e) in self.edges.iter().enumerate() {
            let at = format!("edge[{i}] ({})", e.to);
            kernels[i + 1] = Some(e.kernel.instantiate(&env, &at)?);
        }
        let mut observations = vec![None; n];
        for (i, o) in self.observations.iter().enumerate() {
            let v = self.vertex_id(&o.vertex).ok_or(Error::UnknownVertex(usize::MAX))?;
            observations[v] = Some(o.value.instantiate(&env, &format!("observation[{i}]"))?);
        }
        let root = self.root.value.instantiate(&env, "root.value")?;
        Model::new(graph, kernels, root, observations)
    }

    pub fn builder(&self) -> ModelBuilder {
        let spec = self.clone();
        Arc::new(move |theta: &[f64]| spec.instantiate(theta))
    }
}

/// Parameters used to simulate the tanh-drift tree.
pub const TANH_TRUE_THETA: [f64; 4] = [0.0, 0.65, 0.1, 0.4];
/// Leaf noise variance of the tanh-drift tree.
pub const TANH_OBS_VARIANCE: f64 = 1e-3;

/// Bivariate `dX = tanh.(M X) du + diag(σ0, σ1) dW` with
/// `M = [[-θ0, θ0], [θ1, -θ1]]` on a two-level tree rooted at `(1, -1)`.
///
/// The root has `leaf_counts.len()` children and child `i` has
/// `leaf_counts[i]` children; edge lengths are `U[1.2, 2.2]`. Each deepest
/// vertex is observed through `N(x, 1e-3 I)` at a data vertex `y…`, with data
/// simulated at `truth`.
pub fn tanh_tree(leaf_counts: &[usize], truth: &[f64; 4], seed: u64) -> Result<ModelSpec> {
    if leaf_counts.is_empty() || leaf_counts.contains(&0) {
        return Err(Error::Validation("every internal vertex needs at least one child".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = Uniform::new(1.2, 2.2).map_err(|e| Error::Validation(e.to_string()))?;
    let s = |x: &str| Scalar::from(x);
    let sde = |tau: f64| KernelSpec::Sde {
        drift: DriftForm::TanhLinear,
        b: vec![vec![s("-theta0"), s("theta0")], vec![s("theta1"), s("-theta1")]],
        beta: None,
        sigma: vec![vec![s("sigma0"), 0.0.into()], vec![0.0.into(), s("sigma1")]],
        tau: tau.into(),
        steps: None,
        aux: Some(LinearSpec {
            b: vec![vec![s("-theta0"), s("theta0")], vec![s("theta1"), s("-theta1")]],
            beta: None,
            sigma: vec![vec![s("sigma0"), 0.0.into()], vec![0.0.into(), s("sigma1")]],
        }),
    };
    let obs = || KernelSpec::Gaussian {
        phi: vec![vec![1.0.into(), 0.0.into()], vec![0.0.into(), 1.0.into()]],
        beta: vec![0.0.into(), 0.0.into()],
        q: vec![vec![TANH_OBS_VARIANCE.into(), 0.0.into()], vec![0.0.into(), TANH_OBS_VARIANCE.into()]],
        aux: None,
    };
    let mut edges = Vec::new();
    let mut deepest = Vec::new();
    for (i, &m) in leaf_counts.iter().enumerate() {
        let a = format!("a{i}");
        edges.push(EdgeSpec { from: Parents::One("r".into()), to: a.clone(), kernel: sde(len.sample(&mut rng)) });
        for j in 0..m {
            let b = format!("b{i}_{j}");
            edges.push(EdgeSpec { from: Parents::One(a.clone()), to: b.clone(), kernel: sde(len.sample(&mut rng)) });
            deepest.push(b);
        }
    }
    for b in &deepest {
        edges.push(EdgeSpec { from: Parents::One(b.clone()), to: format!("y{}", &b[1..]), kernel: obs() });
    }
    let param = |name: &str, initial: f64, step: f64, prior: Prior| ParameterSpec { name: name.into(), initial, step, prior };
    let mut spec = ModelSpec {
        root: RootSpec { name: "r".into(), value: StateSpec::Vector(vec![1.0.into(), (-1.0).into()]) },
        parameters: vec![
            param("theta0", truth[0], 0.1, Prior::Flat),
            param("theta1", truth[1], 0.1, Prior::Flat),
            param("sigma0", truth[2], 0.02, Prior::FlatPositive),
            param("sigma1", truth[3], 0.05, Prior::FlatPositive),
        ],
        edges,
        observations: Vec::new(),
        mcmc: Some(McmcSpec { lambda: Some(0.9), iterations: None, burnin: None, obs_variance: None }),
    };
    // data from the unconditioned model: fill the leaves with placeholders,
    // then simulate
    spec.observations = deepest
        .iter()
        .map(|b| ObservationSpec { vertex: format!("y{}", &b[1..]), value: StateSpec::Vector(vec![0.0.into(), 0.0.into()]) })
        .collect();
    let model = spec.instantiate(truth)?;
    let states = simulate_unconditioned(&model, &mut rng)?;
    for o in spec.observations.iter_mut() {
        let v = spec_vertex(&model, &o.vertex, &deepest, leaf_counts)?;
        o.value = StateSpec::from_state(&states[v]);
    }
    Ok(spec)
}

/// Id of data vertex `y…`: data vertices follow the tree vertices in order.
fn spec_vertex(model: &Model, name: &str, deepest: &[String], leaf_counts: &[usize]) -> Result<usize> {
    let k = deepest.iter().position(|b| b[1..] == name[1..]).ok_or(Error::UnknownVertex(usize::MAX))?;
    let v = 1 + leaf_counts.len() + leaf_counts.iter().sum::<usize>() + k;
    (v < model.graph.len()).then_some(v).ok_or(Error::UnknownVertex(v))
}

/// Draws every vertex from the model's own dynamics (Euler–Maruyama on
/// diffusion edges); observations are ignored.
pub fn simulate_unconditioned(model: &Model, rng: &mut ChaCha8Rng) -> Result<Vec<State>> {
    let g = &model.graph;
    let mut states: Vec<Option<State>> = vec![None; g.len()];
    states[g.root()] = Some(model.root_value.clone());
    for v in g.forward_order() {
        if v == g.root() {
            continue;
        }
        let p = g.parents(v)?[0];
        let State::Vector(x) = states[p].as_ref().ok_or(Error::UnknownVertex(p))? else {
            return Err(Error::Unsupported("unconditioned simulation covers vector-valued models".into()));
        };
        let next = match model.kernel(v)? {
            EdgeKernel::Sde(e) => {
                let dt = e.dt();
                let mut x = x.clone();
                let mut u = 0.0;
                for _ in 0..e.steps {
                    let s = e.sde.dispersion.eval(u, &x);
                    let w = DVector::from_fn(s.ncols(), |_, _| StandardNormal.sample(rng)) * dt.sqrt();
                    x = &x + e.sde.drift.eval(u, &x) * dt + s * w;
                    u += dt;
                }
                x
            }
            EdgeKernel::Gaussian(k) => {
                let (m, q) = k.moments(x)?;
                let l = q
                    .cholesky()
                    .ok_or_else(|| Error::numeric("unconditioned simulation", "covariance is not positive definite"))?;
                let z = DVector::from_fn(m.len(), |_, _| StandardNormal.sample(rng));
                m + l.l() * z
            }
            _ => return Err(Error::Unsupported("unconditioned simulation covers SDE and Gaussian edges".into())),
        };
        states[v] = Some(State::Vector(next));
    }
    states.into_iter().map(|s| s.ok_or(Error::Structural("unreached vertex".into()))).collect()
}
