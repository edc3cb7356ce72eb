//! The two passes over a model: backward filtering of potentials from the
//! leaves to the root, then guided forward sampling with a weight per edge.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{CountPotential, SisKernel};
use crate::chebyshev::{binomial_leaf_log_weight, ChebBackward, ChebPotential, WrightFisherEdge};
use crate::ctmc::{CtmcEdge, CtmcPath, CtmcPotential};
use crate::dag::{FinitePrior, GaussPrior, MultiFiniteKernel, MultiGaussKernel};
use crate::error::{Error, Result};
use crate::finite::{FiniteKernel, ParticleKernel, ParticlePotential, VecPotential};
use crate::gamma::{GammaKernel, GammaPotential};
use crate::gaussian::{standard_normal_vec, GaussKernel, GaussPotential};
use crate::graph::{Graph, VertexId};
use crate::linalg::{expm, log_sum_exp};
use crate::potential::{GuidedKernel, Potential};
use crate::sde::{BackwardOde, GuidedPath, SdeEdge};

/// The value of a vertex.
#[derive(Clone, Debug, PartialEq)]
pub enum State {
    Vector(DVector<f64>),
    Discrete(usize),
    Configuration(Vec<usize>),
    Binary(Vec<bool>),
    Real(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    Vector,
    Discrete,
    Configuration,
    Binary,
    Real,
}

impl State {
    pub fn kind(&self) -> StateKind {
        match self {
            State::Vector(_) => StateKind::Vector,
            State::Discrete(_) => StateKind::Discrete,
            State::Configuration(_) => StateKind::Configuration,
            State::Binary(_) => StateKind::Binary,
            State::Real(_) => StateKind::Real,
        }
    }

    fn vector(&self) -> Result<&DVector<f64>> {
        match self {
            State::Vector(v) => Ok(v),
            other => Err(kind_error(StateKind::Vector, other)),
        }
    }

    fn discrete(&self) -> Result<usize> {
        match self {
            State::Discrete(k) => Ok(*k),
            other => Err(kind_error(StateKind::Discrete, other)),
        }
    }

    fn configuration(&self) -> Result<&Vec<usize>> {
        match self {
            State::Configuration(x) => Ok(x),
            other => Err(kind_error(StateKind::Configuration, other)),
        }
    }

    fn binary(&self) -> Result<&Vec<bool>> {
        match self {
            State::Binary(x) => Ok(x),
            other => Err(kind_error(StateKind::Binary, other)),
        }
    }

    fn real(&self) -> Result<f64> {
        match self {
            State::Real(x) => Ok(*x),
            other => Err(kind_error(StateKind::Real, other)),
        }
    }
}

fn kind_error(want: StateKind, got: &State) -> Error {
    Error::FamilyMismatch(format!("expected a {want:?} state, got {:?}", got.kind()))
}

/// A backward message or fused potential.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Gaussian(GaussPotential<f64>),
    Finite(VecPotential<f64>),
    Particle(ParticlePotential<f64>),
    Count(CountPotential<f64>),
    Gamma(GammaPotential),
    Chebyshev(ChebPotential<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Finite,
    Particle,
    Count,
    Gamma,
    Chebyshev,
}

macro_rules! unwrap_message {
    ($name:ident, $variant:ident, $ty:ty) => {
        pub fn $name(&self) -> Result<&$ty> {
            match self {
                Message::$variant(g) => Ok(g),
                other => Err(Error::FamilyMismatch(format!(
                    "expected a {:?} potential, got {:?}",
                    Family::$variant,
                    other.family()
                ))),
            }
        }
    };
}

impl Message {
    pub fn family(&self) -> Family {
        match self {
            Message::Gaussian(_) => Family::Gaussian,
            Message::Finite(_) => Family::Finite,
            Message::Particle(_) => Family::Particle,
            Message::Count(_) => Family::Count,
            Message::Gamma(_) => Family::Gamma,
            Message::Chebyshev(_) => Family::Chebyshev,
        }
    }

    unwrap_message!(gaussian, Gaussian, GaussPotential<f64>);
    unwrap_message!(finite, Finite, VecPotential<f64>);
    unwrap_message!(particle, Particle, ParticlePotential<f64>);
    unwrap_message!(count, Count, CountPotential<f64>);
    unwrap_message!(gamma, Gamma, GammaPotential);
    unwrap_message!(chebyshev, Chebyshev, ChebPotential<f64>);

    pub fn log_eval(&self, x: &State) -> Result<f64> {
        match self {
            Message::Gaussian(g) => g.log_eval(x.vector()?),
            Message::Finite(g) => g.log_eval(&x.discrete()?),
            Message::Particle(g) => g.log_eval(x.configuration()?),
            Message::Count(g) => g.log_eval(x.binary()?),
            Message::Gamma(g) => g.log_eval(&x.real()?),
            Message::Chebyshev(g) => g.log_eval(&x.real()?),
        }
    }

    /// Pointwise product; all inputs must share a family.
    pub fn fuse(gs: &[Message]) -> Result<Message> {
        let first = gs
            .first()
            .ok_or_else(|| Error::Validation("fusion of an empty list".into()))?;
        if gs.len() == 1 {
            return Ok(first.clone());
        }
        if let Some(bad) = gs.iter().find(|g| g.family() != first.family()) {
            return Err(Error::FamilyMismatch(format!(
                "cannot fuse {:?} with {:?} potentials",
                first.family(),
                bad.family()
            )));
        }
        macro_rules! fuse_as {
            ($variant:ident, $get:ident, $ty:ty) => {{
                let v: Vec<$ty> = gs.iter().map(|g| g.$get().cloned()).collect::<Result<_>>()?;
                Ok(Message::$variant(<$ty as Potential>::fuse(&v)?))
            }};
        }
        match first {
            Message::Gaussian(_) => fuse_as!(Gaussian, gaussian, GaussPotential<f64>),
            Message::Finite(_) => fuse_as!(Finite, finite, VecPotential<f64>),
            Message::Particle(_) => fuse_as!(Particle, particle, ParticlePotential<f64>),
            Message::Count(_) => fuse_as!(Count, count, CountPotential<f64>),
            Message::Gamma(_) => fuse_as!(Gamma, gamma, GammaPotential),
            Message::Chebyshev(_) => fuse_as!(Chebyshev, chebyshev, ChebPotential<f64>),
        }
    }
}

/// The kernel on the in-edge of a vertex.
#[derive(Clone, Debug)]
pub enum EdgeKernel {
    Gaussian(GaussKernel<f64>),
    Finite(FiniteKernel<f64>),
    Particle(ParticleKernel<f64>),
    Sis(SisKernel<f64>),
    Gamma(GammaKernel),
    Sde(SdeEdge<f64>),
    Ctmc(CtmcEdge<f64>),
    WrightFisher(WrightFisherEdge<f64>),
    MultiFinite(MultiFiniteKernel<f64>),
    MultiGaussian(MultiGaussKernel<f64>),
    /// Leaf emission: `Binomial(#infected, ρ)` count of a SIS population.
    SisObservation { rho: f64, population: usize },
    /// Leaf emission: `Binomial(n, x)` sample of a Wright–Fisher frequency,
    /// represented at Chebyshev degree `degree`.
    Binomial { n: usize, degree: usize },
}

impl EdgeKernel {
    pub fn family(&self) -> Family {
        match self {
            EdgeKernel::Gaussian(_) | EdgeKernel::Sde(_) | EdgeKernel::MultiGaussian(_) => Family::Gaussian,
            EdgeKernel::Finite(_) | EdgeKernel::Ctmc(_) | EdgeKernel::MultiFinite(_) => Family::Finite,
            EdgeKernel::Particle(_) => Family::Particle,
            EdgeKernel::Sis(_) | EdgeKernel::SisObservation { .. } => Family::Count,
            EdgeKernel::Gamma(_) => Family::Gamma,
            EdgeKernel::WrightFisher(_) | EdgeKernel::Binomial { .. } => Family::Chebyshev,
        }
    }

    /// Kind of the parent states.
    pub fn source_kind(&self) -> StateKind {
        match self.family() {
            Family::Gaussian => StateKind::Vector,
            Family::Finite => StateKind::Discrete,
            Family::Particle => StateKind::Configuration,
            Family::Count => StateKind::Binary,
            Family::Gamma | Family::Chebyshev => StateKind::Real,
        }
    }

    /// Kind of the child state (the observation, on a leaf edge).
    pub fn target_kind(&self) -> StateKind {
        match self {
            EdgeKernel::SisObservation { .. } | EdgeKernel::Binomial { .. } => StateKind::Discrete,
            _ => self.source_kind(),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, EdgeKernel::Sde(_) | EdgeKernel::Ctmc(_) | EdgeKernel::WrightFisher(_))
    }

    fn allowed_on_leaf(&self) -> bool {
        matches!(
            self,
            EdgeKernel::Gaussian(_)
                | EdgeKernel::Finite(_)
                | EdgeKernel::Particle(_)
                | EdgeKernel::Gamma(_)
                | EdgeKernel::SisObservation { .. }
                | EdgeKernel::Binomial { .. }
        )
    }

    fn allowed_inside(&self) -> bool {
        !matches!(self, EdgeKernel::SisObservation { .. } | EdgeKernel::Binomial { .. })
    }

    fn parent_count(&self) -> Option<usize> {
        match self {
            EdgeKernel::MultiFinite(k) => Some(k.parents()),
            EdgeKernel::MultiGaussian(k) => Some(k.parents()),
            _ => None,
        }
    }

    /// True when the auxiliary kernel coincides with the forward one.
    pub fn is_exact(&self) -> bool {
        match self {
            EdgeKernel::Gaussian(k) => matches!(k.forward, crate::gaussian::GaussForward::Auxiliary),
            EdgeKernel::Finite(k) => k.is_exact(),
            EdgeKernel::Particle(k) => k.is_exact(),
            EdgeKernel::Sde(e) => e.is_exact(),
            EdgeKernel::Ctmc(e) => e.is_exact(),
            EdgeKernel::WrightFisher(_) | EdgeKernel::SisObservation { .. } => true,
            EdgeKernel::Binomial { n, degree } => degree >= n,
            EdgeKernel::Gamma(_) | EdgeKernel::Sis(_) => false,
            EdgeKernel::MultiFinite(k) => k.parents() == 1 && k.kernel.is_exact(),
            EdgeKernel::MultiGaussian(k) => {
                k.parents() == 1 && matches!(k.kernel.forward, crate::gaussian::GaussForward::Auxiliary)
            }
        }
    }
}

/// Graph, one kernel per non-root vertex, root value and leaf observations.
#[derive(Clone, Debug)]
pub struct Model {
    pub graph: Graph,
    kernels: Vec<Option<EdgeKernel>>,
    pub root_value: State,
    observations: Vec<Option<State>>,
}

impl Model {
    pub fn new(
        graph: Graph,
        kernels: Vec<Option<EdgeKernel>>,
        root_value: State,
        observations: Vec<Option<State>>,
    ) -> Result<Self> {
        let model = Self { graph, kernels, root_value, observations };
        model.validate()?;
        Ok(model)
    }

    pub fn kernel(&self, v: VertexId) -> Result<&EdgeKernel> {
        self.kernels
            .get(v)
            .and_then(|k| k.as_ref())
            .ok_or(Error::UnknownVertex(v))
    }

    pub fn observation(&self, v: VertexId) -> Option<&State> {
        self.observations.get(v).and_then(|o| o.as_ref())
    }

    pub fn kernels(&self) -> &[Option<EdgeKernel>] {
        &self.kernels
    }

    pub fn observations(&self) -> &[Option<State>] {
        &self.observations
    }

    fn validate(&self) -> Result<()> {
        let g = &self.graph;
        let n = g.len();
        if self.kernels.len() != n || self.observations.len() != n {
            return Err(Error::Structural(format!(
                "{} kernels and {} observation slots for {n} vertices",
                self.kernels.len(),
                self.observations.len()
            )));
        }
        if self.kernels[g.root()].is_some() {
            return Err(Error::Structural("the root has no incoming edge".into()));
        }
        for v in 0..n {
            if v == g.root() {
                if self.observations[v].is_some() {
                    return Err(Error::Structural("the root value is given separately".into()));
                }
                continue;
            }
            let k = self.kernels[v]
                .as_ref()
                .ok_or_else(|| Error::Structural(format!("vertex {v} has no incoming kernel")))?;
            let np = g.parents(v)?.len();
            match k.parent_count() {
                Some(p) if p != np => {
                    return Err(Error::Structural(format!(
                        "edge into {v} has {np} parents but its kernel expects {p}"
                    )))
                }
                None if np != 1 => {
                    return Err(Error::Structural(format!(
                        "edge into {v} has {np} parents; only multi-parent kernels accept more than one"
                    )))
                }
                _ => {}
            }
            if g.is_leaf(v) {
                if !k.allowed_on_leaf() || np != 1 {
                    return Err(Error::Validation(format!(
                        "leaf {v} must be reached by a single-parent emission kernel"
                    )));
                }
                let obs = self.observations[v]
                    .as_ref()
                    .ok_or_else(|| Error::Validation(format!("leaf {v} has no observation")))?;
                if obs.kind() != k.target_kind() {
                    return Err(Error::Validation(format!(
                        "leaf {v} observation is {:?} but its kernel emits {:?}",
                        obs.kind(),
                        k.target_kind()
                    )));
                }
            } else {
                if self.observations[v].is_some() {
                    return Err(Error::Validation(format!("internal vertex {v} carries an observation")));
                }
                if !k.allowed_inside() {
                    return Err(Error::Validation(format!("edge into internal vertex {v} is a leaf-only emission")));
                }
            }
        }
        // compatibility of fused messages and of states at every vertex
        for u in 0..n {
            let ch = g.children(u)?;
            let Some(&c0) = ch.first() else { continue };
            let fam = self.kernel(c0)?.family();
            let src = self.kernel(c0)?.source_kind();
            for &c in ch {
                if self.kernel(c)?.family() != fam {
                    return Err(Error::FamilyMismatch(format!(
                        "vertex {u} receives {:?} and {:?} messages",
                        fam,
                        self.kernel(c)?.family()
                    )));
                }
            }
            let own = if u == g.root() { self.root_value.kind() } else { self.kernel(u)?.target_kind() };
            if own != src {
                return Err(Error::FamilyMismatch(format!(
                    "vertex {u} holds a {own:?} state but its out-edges expect {src:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Continuous-edge representation kept from the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgeCache {
    Sde(BackwardOde<f64>),
    Ctmc(CtmcPotential<f64>),
    WrightFisher(ChebBackward<f64>),
}

/// One step of the backward schedule: fusion at `vertex` of the messages
/// coming from `fused_children`, then pullback along its in-edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackwardStep {
    pub vertex: VertexId,
    pub fused_children: Vec<VertexId>,
}

#[derive(Clone, Debug)]
pub struct BackwardPass {
    /// `g_s` at every non-leaf vertex (the root included).
    pub fused: Vec<Option<Message>>,
    /// Per child vertex, the message sent to each parent of its in-edge.
    pub messages: Vec<Vec<Message>>,
    pub continuous: Vec<Option<EdgeCache>>,
    pub schedule: Vec<BackwardStep>,
    /// `log g_r(x_r)`.
    pub log_root: f64,
}

impl BackwardPass {
    pub fn fused_at(&self, v: VertexId) -> Result<&Message> {
        self.fused
            .get(v)
            .and_then(|m| m.as_ref())
            .ok_or(Error::UnknownVertex(v))
    }

    /// Message on the edge into `v` (first parent).
    pub fn edge_message(&self, v: VertexId) -> Result<&Message> {
        self.messages.get(v).and_then(|m| m.first()).ok_or(Error::UnknownVertex(v))
    }
}

/// User-supplied or derived parent priors for multi-parent edges.
#[derive(Clone, Debug)]
enum Marginal {
    Finite(Vec<f64>),
    Gaussian(DVector<f64>, DMatrix<f64>),
}

/// Marginals of every vertex when the auxiliary dynamics started at the
/// root value can be pushed forward in closed form.
fn push_forward_marginals(model: &Model) -> Vec<Option<Marginal>> {
    let g = &model.graph;
    let mut out: Vec<Option<Marginal>> = vec![None; g.len()];
    out[g.root()] = match &model.root_value {
        State::Discrete(k) => {
            // the state count is read off the first out-edge
            let r = g.children(g.root()).ok().and_then(|c| c.first().copied()).and_then(|c| match model.kernel(c).ok()? {
                EdgeKernel::Finite(k) => Some(k.aux.nrows()),
                EdgeKernel::Ctmc(e) => Some(e.states()),
                EdgeKernel::MultiFinite(m) => {
                    let pos = g.parents(c).ok()?.iter().position(|&p| p == g.root())?;
                    Some(m.parent_states[pos])
                }
                _ => None,
            });
            r.filter(|&r| *k < r).map(|r| {
                let mut p = vec![0.0; r];
                p[*k] = 1.0;
                Marginal::Finite(p)
            })
        }
        State::Vector(x) => Some(Marginal::Gaussian(x.clone(), DMatrix::zeros(x.len(), x.len()))),
        _ => None,
    };
    for v in g.forward_order() {
        let Ok(pa) = g.parents(v) else { continue };
        let parent_marg: Option<Vec<&Marginal>> = pa.iter().map(|&u| out[u].as_ref()).collect();
        let Some(pm) = parent_marg else { continue };
        let Ok(kernel) = model.kernel(v) else { continue };
        out[v] = match (kernel, pm.as_slice()) {
            (EdgeKernel::Finite(k), [Marginal::Finite(p)]) => Some(Marginal::Finite(row_times(p, &k.aux))),
            (EdgeKernel::Ctmc(e), [Marginal::Finite(p)]) => {
                expm(&(e.aux.to_dense() * e.tau)).ok().map(|m| Marginal::Finite(row_times(p, &m)))
            }
            (EdgeKernel::MultiFinite(k), ps) => {
                let ms: Option<Vec<Vec<f64>>> = ps
                    .iter()
                    .map(|m| match m {
                        Marginal::Finite(p) => Some(p.clone()),
                        _ => None,
                    })
                    .collect();
                ms.map(|ms| Marginal::Finite(row_times(&product_pmf(&ms), &k.kernel.aux)))
            }
            (EdgeKernel::Gaussian(k), [Marginal::Gaussian(m, p)]) => Some(gauss_push(&k.aux, m, p)),
            (EdgeKernel::MultiGaussian(k), ps) => {
                let ms: Option<Vec<(DVector<f64>, DMatrix<f64>)>> = ps
                    .iter()
                    .map(|m| match m {
                        Marginal::Gaussian(m, p) => Some((m.clone(), p.clone())),
                        _ => None,
                    })
                    .collect();
                ms.map(|ms| {
                    let pr = GaussPrior::product(&ms);
                    gauss_push(&k.kernel.aux, &pr.mean, &pr.cov)
                })
            }
            _ => None,
        };
    }
    out
}

fn gauss_push(aux: &crate::gaussian::LinearGauss<f64>, m: &DVector<f64>, p: &DMatrix<f64>) -> Marginal {
    Marginal::Gaussian(aux.mean(m), &aux.phi * p * aux.phi.transpose() + &aux.q)
}

fn row_times(p: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| p[i] * m[(i, j)]).sum()).collect()
}

fn product_pmf(ms: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for m in ms {
        out = out.iter().flat_map(|a| m.iter().map(move |b| a * b)).collect();
    }
    out
}

/// Backward filter: leaf initialization, fusion and pullback in
/// [`Graph::backward_order`].
pub fn run_backward(model: &Model) -> Result<BackwardPass> {
    let g = &model.graph;
    let n = g.len();
    let needs_prior = (0..n).any(|v| model.kernel(v).map(|k| k.parent_count().unwrap_or(1) > 1).unwrap_or(false));
    let marginals = if needs_prior { push_forward_marginals(model) } else { vec![None; n] };
    let mut fused: Vec<Option<Message>> = vec![None; n];
    let mut messages: Vec<Vec<Message>> = vec![Vec::new(); n];
    let mut continuous: Vec<Option<EdgeCache>> = vec![None; n];
    let mut schedule = Vec::with_capacity(n);

    let fuse_at = |u: VertexId, messages: &[Vec<Message>]| -> Result<(Message, Vec<VertexId>)> {
        let ch = g.children(u)?;
        let mut parts = Vec::with_capacity(ch.len());
        for &c in ch {
            let pos = g.parents(c)?.iter().position(|&p| p == u).expect("child lists its parent");
            parts.push(messages[c][pos].clone());
        }
        Ok((Message::fuse(&parts).map_err(|e| e.at_edge(u))?, ch.to_vec()))
    };

    for &v in g.backward_order() {
        let kernel = model.kernel(v)?;
        if g.is_leaf(v) {
            // the emission, read as a function of the parent, is the edge message
            let obs = model.observation(v).ok_or_else(|| Error::Validation(format!("leaf {v} has no observation")))?;
            messages[v] = vec![leaf_message(kernel, obs).map_err(|e| e.at_edge(v))?];
            schedule.push(BackwardStep { vertex: v, fused_children: Vec::new() });
            continue;
        }
        let (gv, fused_children) = fuse_at(v, &messages)?;
        let parents = g.parents(v)?;
        let (msgs, cache) = pullback(kernel, &gv, parents, &marginals).map_err(|e| e.at_edge(v))?;
        messages[v] = msgs;
        continuous[v] = cache;
        fused[v] = Some(gv);
        schedule.push(BackwardStep { vertex: v, fused_children });
    }
    let (root_msg, root_children) = fuse_at(g.root(), &messages)?;
    let log_root = root_msg.log_eval(&model.root_value)?;
    fused[g.root()] = Some(root_msg);
    schedule.push(BackwardStep { vertex: g.root(), fused_children: root_children });
    Ok(BackwardPass { fused, messages, continuous, schedule, log_root })
}

fn leaf_message(kernel: &EdgeKernel, obs: &State) -> Result<Message> {
    Ok(match kernel {
        EdgeKernel::Gaussian(k) => Message::Gaussian(GaussPotential::init_leaf(obs.vector()?, &k.aux)?),
        EdgeKernel::Finite(k) => Message::Finite(k.leaf_potential(obs.discrete()?)?),
        EdgeKernel::Particle(k) => Message::Particle(k.leaf_potential(obs.configuration()?)?),
        EdgeKernel::Gamma(k) => Message::Gamma(k.leaf_potential(obs.real()?)?),
        EdgeKernel::SisObservation { rho, population } => {
            Message::Count(CountPotential::init_leaf(obs.discrete()?, *rho, *population)?)
        }
        EdgeKernel::Binomial { n, degree } => Message::Chebyshev(ChebPotential::init_leaf(*n, obs.discrete()?, *degree)?),
        _ => return Err(Error::Validation("kernel cannot emit an observation".into())),
    })
}

fn pullback(
    kernel: &EdgeKernel,
    gv: &Message,
    parents: &[VertexId],
    marginals: &[Option<Marginal>],
) -> Result<(Vec<Message>, Option<EdgeCache>)> {
    let one = |m: Message| Ok((vec![m], None));
    match kernel {
        EdgeKernel::SisObservation { .. } | EdgeKernel::Binomial { .. } => {
            Err(Error::Validation("leaf-only emission on an internal edge".into()))
        }
        EdgeKernel::Gaussian(k) => one(Message::Gaussian(k.pullback(gv.gaussian()?)?)),
        EdgeKernel::Finite(k) => one(Message::Finite(k.pullback(gv.finite()?)?)),
        EdgeKernel::Particle(k) => one(Message::Particle(k.pullback(gv.particle()?)?)),
        EdgeKernel::Sis(k) => one(Message::Count(k.pullback(gv.count()?)?)),
        EdgeKernel::Gamma(k) => one(Message::Gamma(k.pullback(gv.gamma()?)?)),
        EdgeKernel::Sde(e) => {
            let ode = e.solve_backward(gv.gaussian()?)?;
            Ok((vec![Message::Gaussian(ode.edge_potential())], Some(EdgeCache::Sde(ode))))
        }
        EdgeKernel::Ctmc(e) => {
            let pot = e.pullback(gv.finite()?)?;
            Ok((vec![Message::Finite(pot.edge_potential())], Some(EdgeCache::Ctmc(pot))))
        }
        EdgeKernel::WrightFisher(e) => {
            let bw = e.pullback(gv.chebyshev()?)?;
            Ok((vec![Message::Chebyshev(bw.edge_potential()?)], Some(EdgeCache::WrightFisher(bw))))
        }
        EdgeKernel::MultiFinite(k) => {
            let default = if k.prior.is_none() && k.parents() > 1 {
                let ms: Option<Vec<Vec<f64>>> = parents
                    .iter()
                    .map(|&u| match &marginals[u] {
                        Some(Marginal::Finite(p)) => Some(p.clone()),
                        _ => None,
                    })
                    .collect();
                ms.map(FinitePrior::Product)
            } else {
                None
            };
            let msgs = k.pullback(gv.finite()?, default.as_ref())?;
            Ok((msgs.into_iter().map(Message::Finite).collect(), None))
        }
        EdgeKernel::MultiGaussian(k) => {
            let default = if k.prior.is_none() && k.parents() > 1 {
                let ms: Option<Vec<(DVector<f64>, DMatrix<f64>)>> = parents
                    .iter()
                    .map(|&u| match &marginals[u] {
                        Some(Marginal::Gaussian(m, p)) => Some((m.clone(), p.clone())),
                        _ => None,
                    })
                    .collect();
                ms.map(|ms| GaussPrior::product(&ms))
            } else {
                None
            };
            let msgs = k.pullback(gv.gaussian()?, default.as_ref())?;
            Ok((msgs.into_iter().map(Message::Gaussian).collect(), None))
        }
    }
}

/// Standard-normal driving noise of the Gaussian-type edges, keyed by child
/// vertex. SDE edges hold one vector per grid step; discrete Gaussian edges
/// a single vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Innovations {
    pub edges: Vec<Option<Vec<DVector<f64>>>>,
}

impl Innovations {
    pub fn len(&self) -> usize {
        self.edges.iter().flatten().map(|z| z.iter().map(|v| v.len()).sum::<usize>()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view of all components, in vertex order.
    pub fn flatten(&self) -> Vec<f64> {
        self.edges.iter().flatten().flat_map(|z| z.iter().flat_map(|v| v.iter().copied())).collect()
    }
}

/// Path detail of continuous edges.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgePath {
    Sde(GuidedPath<f64>),
    Ctmc(CtmcPath<f64>),
    WrightFisher(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Option<State>>,
    pub paths: Vec<Option<EdgePath>>,
}

impl Trajectory {
    pub fn state(&self, v: VertexId) -> Result<&State> {
        self.states.get(v).and_then(|s| s.as_ref()).ok_or(Error::UnknownVertex(v))
    }
}

/// Per-edge log-weights keyed by child vertex, plus `log g_r(x_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightLedger {
    pub log_root: f64,
    pub entries: Vec<Option<f64>>,
}

impl WeightLedger {
    pub fn edge_total(&self) -> f64 {
        self.entries.iter().flatten().sum()
    }

    /// `log g_r(x_r) + Σ_e log w_e`.
    pub fn total(&self) -> f64 {
        let s = self.edge_total();
        if s == f64::NEG_INFINITY || self.log_root == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.log_root + s
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stream for `(run seed, sample, stream)`.
pub fn stream_seed(seed: u64, sample: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ sample) ^ stream.wrapping_add(0x5851_f42d_4c95_7f2d))
}

fn edge_rng(seed: u64, v: VertexId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, v as u64))
}

/// Guided forward pass with fresh noise; all randomness is derived from
/// one draw of `rng`, with an independent stream per edge.
pub fn run_forward(model: &Model, bp: &BackwardPass, rng: &mut dyn RngCore) -> Result<(Trajectory, WeightLedger)> {
    run_forward_seeded(model, bp, rng.next_u64())
}

pub fn run_forward_seeded(model: &Model, bp: &BackwardPass, seed: u64) -> Result<(Trajectory, WeightLedger)> {
    forward(model, bp, None, seed).map(|(t, l, _)| (t, l))
}

/// Guided forward pass driven by given innovations (other edges use `seed`).
pub fn run_forward_with(
    model: &Model,
    bp: &BackwardPass,
    innovations: &Innovations,
    seed: u64,
) -> Result<(Trajectory, WeightLedger)> {
    forward(model, bp, Some(innovations), seed).map(|(t, l, _)| (t, l))
}

/// Fresh innovations for every Gaussian-type edge, as drawn by
/// [`run_forward_seeded`] with the same seed.
pub fn draw_innovations(model: &Model, bp: &BackwardPass, seed: u64) -> Result<Innovations> {
    forward(model, bp, None, seed).map(|(_, _, z)| z)
}

fn forward(
    model: &Model,
    bp: &BackwardPass,
    given: Option<&Innovations>,
    seed: u64,
) -> Result<(Trajectory, WeightLedger, Innovations)> {
    let g = &model.graph;
    let n = g.len();
    let mut states: Vec<Option<State>> = vec![None; n];
    let mut paths: Vec<Option<EdgePath>> = vec![None; n];
    let mut entries: Vec<Option<f64>> = vec![None; n];
    let mut used = Innovations { edges: vec![None; n] };
    states[g.root()] = Some(model.root_value.clone());
    for v in g.forward_order() {
        let parents = g.parents(v)?;
        let ps: Vec<&State> = parents
            .iter()
            .map(|&u| states[u].as_ref().ok_or(Error::UnknownVertex(u)))
            .collect::<Result<_>>()?;
        let z = given.and_then(|inn| inn.edges.get(v).cloned().flatten());
        let mut rng = edge_rng(seed, v);
        let step = forward_edge(model, bp, v, &ps, z, &mut rng).map_err(|e| e.at_edge(v))?;
        states[v] = Some(step.state);
        paths[v] = step.path;
        entries[v] = Some(step.log_weight);
        used.edges[v] = step.innovations;
    }
    Ok((Trajectory { states, paths }, WeightLedger { log_root: bp.log_root, entries }, used))
}

struct ForwardStep {
    state: State,
    path: Option<EdgePath>,
    log_weight: f64,
    innovations: Option<Vec<DVector<f64>>>,
}

fn forward_edge(
    model: &Model,
    bp: &BackwardPass,
    v: VertexId,
    parents: &[&State],
    z: Option<Vec<DVector<f64>>>,
    rng: &mut dyn RngCore,
) -> Result<ForwardStep> {
    let kernel = model.kernel(v)?;
    let msgs = &bp.messages[v];
    let x = parents[0];
    let step = |state: State, log_weight: f64| ForwardStep { state, path: None, log_weight, innovations: None };
    if model.graph.is_leaf(v) {
        let obs = model.observation(v).ok_or_else(|| Error::Validation(format!("leaf {v} has no observation")))?;
        let edge = &msgs[0];
        let w = match kernel {
            EdgeKernel::Gaussian(k) => k.leaf_log_weight(obs.vector()?, edge.gaussian()?, x.vector()?)?,
            EdgeKernel::Finite(k) => k.leaf_log_weight(obs.discrete()?, edge.finite()?, x.discrete()?)?,
            EdgeKernel::Particle(k) => k.leaf_log_weight(obs.configuration()?, edge.particle()?, x.configuration()?)?,
            EdgeKernel::Gamma(k) => k.leaf_log_weight(obs.real()?, x.real()?)?,
            EdgeKernel::SisObservation { .. } => {
                x.binary()?;
                0.0
            }
            EdgeKernel::Binomial { n, .. } => binomial_leaf_log_weight(*n, obs.discrete()?, edge.chebyshev()?, x.real()?)?,
            _ => return Err(Error::Validation("kernel cannot emit an observation".into())),
        };
        return Ok(step(obs.clone(), w));
    }
    let gs = bp.fused_at(v)?;
    Ok(match kernel {
        EdgeKernel::Gaussian(k) => {
            let gp = gs.gaussian()?;
            let xv = x.vector()?;
            let zi = match z {
                Some(mut zs) if zs.len() == 1 => zs.remove(0),
                Some(_) => return Err(Error::Dimension("Gaussian edges take a single innovation vector".into())),
                None => standard_normal_vec(k.target_dim(), rng),
            };
            let y = k.guided_from_innovation(gp, xv, &zi)?;
            let w = k.log_weight(gp, msgs[0].gaussian()?, xv)?;
            ForwardStep { state: State::Vector(y), path: None, log_weight: w, innovations: Some(vec![zi]) }
        }
        EdgeKernel::MultiGaussian(k) => {
            let gp = gs.gaussian()?;
            let xs: Vec<&DVector<f64>> = parents.iter().map(|p| p.vector()).collect::<Result<_>>()?;
            let stacked = k.stack(&xs)?;
            let zi = match z {
                Some(mut zs) if zs.len() == 1 => zs.remove(0),
                Some(_) => return Err(Error::Dimension("Gaussian edges take a single innovation vector".into())),
                None => standard_normal_vec(k.kernel.target_dim(), rng),
            };
            let y = k.kernel.guided_from_innovation(gp, &stacked, &zi)?;
            let ms: Vec<GaussPotential<f64>> = msgs.iter().map(|m| m.gaussian().cloned()).collect::<Result<_>>()?;
            let w = k.log_weight(gp, &ms, &xs)?;
            ForwardStep { state: State::Vector(y), path: None, log_weight: w, innovations: Some(vec![zi]) }
        }
        EdgeKernel::Finite(k) => {
            let gp = gs.finite()?;
            let xi = x.discrete()?;
            let y = k.guided_sample(gp, &xi, rng)?;
            step(State::Discrete(y), k.log_weight(gp, msgs[0].finite()?, &xi)?)
        }
        EdgeKernel::MultiFinite(k) => {
            let gp = gs.finite()?;
            let xs: Vec<usize> = parents.iter().map(|p| p.discrete()).collect::<Result<_>>()?;
            let y = k.guided_sample(gp, &xs, rng)?;
            let ms: Vec<VecPotential<f64>> = msgs.iter().map(|m| m.finite().cloned()).collect::<Result<_>>()?;
            step(State::Discrete(y), k.log_weight(gp, &ms, &xs)?)
        }
        EdgeKernel::Particle(k) => {
            let gp = gs.particle()?;
            let xi = x.configuration()?;
            let y = k.guided_sample(gp, xi, rng)?;
            step(State::Configuration(y), k.log_weight(gp, msgs[0].particle()?, xi)?)
        }
        EdgeKernel::Sis(k) => {
            let gp = gs.count()?;
            let xi = x.binary()?;
            let y = k.guided_sample(gp, xi, rng)?;
            step(State::Binary(y), k.log_weight(gp, msgs[0].count()?, xi)?)
        }
        EdgeKernel::Gamma(k) => {
            let gp = gs.gamma()?;
            let xi = x.real()?;
            let y = k.guided_sample(gp, &xi, rng)?;
            step(State::Real(y), k.log_weight(gp, msgs[0].gamma()?, &xi)?)
        }
        EdgeKernel::Sde(e) => {
            let Some(EdgeCache::Sde(ode)) = &bp.continuous[v] else {
                return Err(Error::Structural(format!("no backward solution cached for edge {v}")));
            };
            let x0 = x.vector()?;
            let zs = match z {
                Some(zs) => zs,
                None => e.draw_innovations(x0, rng),
            };
            let path = e.guided_from_innovations(ode, x0, zs)?;
            let w = e.log_weight(ode, &path)?;
            let innovations = Some(path.innovations.clone());
            ForwardStep { state: State::Vector(path.end().clone()), path: Some(EdgePath::Sde(path)), log_weight: w, innovations }
        }
        EdgeKernel::Ctmc(e) => {
            let Some(EdgeCache::Ctmc(pot)) = &bp.continuous[v] else {
                return Err(Error::Structural(format!("no backward solution cached for edge {v}")));
            };
            let path = e.guided_simulate(pot, x.discrete()?, rng)?;
            let w = e.log_weight(pot, &path)?;
            ForwardStep { state: State::Discrete(path.end()), path: Some(EdgePath::Ctmc(path)), log_weight: w, innovations: None }
        }
        EdgeKernel::WrightFisher(e) => {
            let Some(EdgeCache::WrightFisher(bw)) = &bp.continuous[v] else {
                return Err(Error::Structural(format!("no backward solution cached for edge {v}")));
            };
            let path = e.guided_simulate(bw, x.real()?, rng)?;
            let end = *path.last().expect("paths have a start state");
            ForwardStep {
                state: State::Real(end),
                path: Some(EdgePath::WrightFisher(path)),
                log_weight: crate::chebyshev::wf_log_weight(),
                innovations: None,
            }
        }
        EdgeKernel::SisObservation { .. } | EdgeKernel::Binomial { .. } => {
            return Err(Error::Validation("leaf-only emission on an internal edge".into()))
        }
    })
}

/// Innovations that make the guided pass under `bp` reproduce `traj` on
/// every Gaussian-type edge.
pub fn innovations_from_trajectory(model: &Model, bp: &BackwardPass, traj: &Trajectory) -> Result<Innovations> {
    let g = &model.graph;
    let mut edges = vec![None; g.len()];
    for v in g.forward_order() {
        if g.is_leaf(v) {
            continue;
        }
        let pa = g.parents(v)?;
        let inv = match model.kernel(v)? {
            EdgeKernel::Sde(e) => {
                let Some(EdgeCache::Sde(ode)) = &bp.continuous[v] else {
                    return Err(Error::Structural(format!("no backward solution cached for edge {v}")));
                };
                let Some(EdgePath::Sde(path)) = &traj.paths[v] else {
                    return Err(Error::Structural(format!("trajectory has no path on edge {v}")));
                };
                Some(e.innovations_from_states(ode, &path.states).map_err(|e| e.at_edge(v))?)
            }
            EdgeKernel::Gaussian(k) => {
                let x = traj.state(pa[0])?.vector()?;
                let y = traj.state(v)?.vector()?;
                Some(vec![k.innovation_from_sample(bp.fused_at(v)?.gaussian()?, x, y).map_err(|e| e.at_edge(v))?])
            }
            EdgeKernel::MultiGaussian(k) => {
                let xs: Vec<&DVector<f64>> = pa.iter().map(|&u| traj.state(u)?.vector()).collect::<Result<_>>()?;
                let y = traj.state(v)?.vector()?;
                let z = k.kernel.innovation_from_sample(bp.fused_at(v)?.gaussian()?, &k.stack(&xs)?, y);
                Some(vec![z.map_err(|e| e.at_edge(v))?])
            }
            _ => None,
        };
        edges[v] = inv;
    }
    Ok(Innovations { edges })
}

/// Monte Carlo estimate of the likelihood in log form.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodEstimate {
    /// `log((1/n) Σ_i exp(total_i))`.
    pub log_mean: f64,
    /// Standard error of `log_mean` by the delta method.
    pub log_se: f64,
    /// Standard error of the mean relative to the mean.
    pub relative_se: f64,
    pub samples: usize,
    /// All samples had zero weight.
    pub degenerate: bool,
}

impl LikelihoodEstimate {
    pub fn from_log_weights(totals: &[f64]) -> Result<Self> {
        let n = totals.len();
        if n == 0 {
            return Err(Error::Validation("likelihood estimation needs at least one sample".into()));
        }
        let max = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Ok(Self {
                log_mean: f64::NEG_INFINITY,
                log_se: f64::NAN,
                relative_se: f64::NAN,
                samples: n,
                degenerate: true,
            });
        }
        if !max.is_finite() {
            return Err(Error::numeric("likelihood estimate", "a sample has a non-finite log-weight"));
        }
        let scaled: Vec<f64> = totals.iter().map(|t| (t - max).exp()).collect();
        let mean = scaled.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            scaled.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let rel = (var / n as f64).sqrt() / mean;
        Ok(Self {
            log_mean: log_sum_exp(totals.iter().copied()) - (n as f64).ln(),
            log_se: rel,
            relative_se: rel,
            samples: n,
            degenerate: false,
        })
    }
}

/// Seed of sample `i` in [`estimate_likelihood`].
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    stream_seed(seed, i as u64 + 1, u64::MAX)
}

/// Filters once, then draws `n` guided samples in parallel.
pub fn estimate_likelihood(model: &Model, n: usize, seed: u64) -> Result<LikelihoodEstimate> {
    let bp = run_backward(model)?;
    estimate_with(model, &bp, n, seed)
}

pub fn estimate_with(model: &Model, bp: &BackwardPass, n: usize, seed: u64) -> Result<LikelihoodEstimate> {
    let totals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| run_forward_seeded(model, bp, sample_seed(seed, i)).map(|(_, l)| l.total()))
        .collect::<Result<_>>()?;
    LikelihoodEstimate::from_log_weights(&totals)
}
