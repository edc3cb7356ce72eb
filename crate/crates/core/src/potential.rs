//! Family-agnostic contract for g-potentials and the kernels that act on them.

use rand::RngCore;

use crate::error::Result;

/// A measurable map `x -> g(x) >= 0` in a closed parametric family.
///
/// Normalization constants are always carried explicitly; `log_eval`
/// returns the exact log-value, `-inf` where `g` vanishes.
pub trait Potential: Clone + Sized {
    type State;
    type Scalar;

    fn log_eval(&self, x: &Self::State) -> Result<Self::Scalar>;

    /// Pointwise product of a nonempty family of potentials.
    fn fuse(gs: &[Self]) -> Result<Self>;
}

/// A forward kernel paired with an auxiliary kernel of closed-form pullback.
pub trait GuidedKernel {
    type Potential: Potential;

    /// `x -> ∫ g(y) κ̃(x, dy)` in closed form.
    fn pullback(&self, g: &Self::Potential) -> Result<Self::Potential>;

    /// Draw from `κ°(x, dy) ∝ g(y) κ(x, dy)`.
    fn guided_sample(
        &self,
        g: &Self::Potential,
        x: &<Self::Potential as Potential>::State,
        rng: &mut dyn RngCore,
    ) -> Result<<Self::Potential as Potential>::State>;

    /// `log ∫ g dκ(x) - log g_edge(x)` where `g_edge` is the pullback of `g`
    /// under the auxiliary kernel.
    fn log_weight(
        &self,
        g: &Self::Potential,
        g_edge: &Self::Potential,
        x: &<Self::Potential as Potential>::State,
    ) -> Result<<Self::Potential as Potential>::Scalar>;
}
