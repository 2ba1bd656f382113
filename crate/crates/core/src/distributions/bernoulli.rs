use super::Triplet;
use crate::{Error, Result};

/// Two-point law on {0, 1} with `Pr(L = 1) = pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliParams {
    pi: f64,
}

impl BernoulliParams {
    pub fn new(pi: f64) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::domain(format!("bernoulli probability {pi} outside (0, 1)")));
        }
        Ok(Self { pi })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    /// `Pr(L <= 0)`.
    pub fn cdf_zero(&self) -> f64 {
        1.0 - self.pi
    }

    pub fn triplet(&self, y: u8) -> Triplet {
        match y {
            0 => Triplet { cdf: 1.0 - self.pi, cdf_left: 0.0, density: 1.0 - self.pi },
            _ => Triplet { cdf: 1.0, cdf_left: 1.0 - self.pi, density: self.pi },
        }
    }
}
