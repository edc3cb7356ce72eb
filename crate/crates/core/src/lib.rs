//! Backward filtering forward guiding on directed trees and DAGs.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod chebyshev;
pub mod dag;
pub mod engine;
pub mod ctmc;
pub mod error;
pub mod finite;
pub mod gamma;
pub mod gaussian;
pub mod graph;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod oracle;
pub mod potential;
pub mod scalar;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};

/// `f64` instances of the scalar-generic types.
pub type GaussPotentialF64 = gaussian::GaussPotential<f64>;
pub type LinearGaussF64 = gaussian::LinearGauss<f64>;
pub type GaussKernelF64 = gaussian::GaussKernel<f64>;
pub type VecPotentialF64 = finite::VecPotential<f64>;
pub type FiniteKernelF64 = finite::FiniteKernel<f64>;
pub type ParticlePotentialF64 = finite::ParticlePotential<f64>;
pub type ParticleKernelF64 = finite::ParticleKernel<f64>;
pub type CountPotentialF64 = agent::CountPotential<f64>;
pub type SisKernelF64 = agent::SisKernel<f64>;
pub type SdeEdgeF64 = sde::SdeEdge<f64>;
pub type LinearAuxF64 = sde::LinearAux<f64>;
pub type BackwardOdeF64 = sde::BackwardOde<f64>;
pub type CtmcEdgeF64 = ctmc::CtmcEdge<f64>;
pub type CtmcPotentialF64 = ctmc::CtmcPotential<f64>;
pub type ChebPotentialF64 = chebyshev::ChebPotential<f64>;
pub type WrightFisherEdgeF64 = chebyshev::WrightFisherEdge<f64>;
pub type MultiFiniteKernelF64 = dag::MultiFiniteKernel<f64>;
pub type MultiGaussKernelF64 = dag::MultiGaussKernel<f64>;
