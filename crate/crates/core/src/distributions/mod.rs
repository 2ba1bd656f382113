//! Marginal distributions used by the copula model: the Bernoulli lapse
//! indicator and the Tweedie compound Poisson-gamma claims law.

mod bernoulli;
mod tweedie;

pub use bernoulli::BernoulliParams;
pub use tweedie::TweedieParams;

/// Distribution function, its left limit, and the hybrid density at one
/// observed value.
///
/// At a mass point `density` is the probability mass `cdf - cdf_left`; at a
/// point of continuity `cdf == cdf_left` and `density` is the Lebesgue density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub cdf: f64,
    pub cdf_left: f64,
    pub density: f64,
}

impl Triplet {
    /// True when the observation sits on an atom of the distribution.
    pub fn is_discrete(&self) -> bool {
        self.cdf > self.cdf_left
    }
}
