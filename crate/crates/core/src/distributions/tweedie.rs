use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use super::Triplet;
use crate::{Error, Result};

/// Relative size below which series terms are dropped.
const SERIES_REL_TOL: f64 = 1e-12;
const MAX_SERIES_TERMS: usize = 200_000;

/// Tweedie law with mean `mu`, dispersion `phi` and power `1 < power < 2`.
///
/// In this regime the law is a Poisson(`lambda`) sum of Gamma(`shape`, `scale`)
/// variables, so it has an atom at zero and a density on `(0, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TweedieParams {
    mu: f64,
    phi: f64,
    power: f64,
}

impl TweedieParams {
    pub fn new(mu: f64, phi: f64, power: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::domain(format!("tweedie mean {mu} must be positive")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::domain(format!("tweedie dispersion {phi} must be positive")));
        }
        if !(power > 1.0 && power < 2.0) {
            return Err(Error::domain(format!("tweedie power {power} outside (1, 2)")));
        }
        Ok(Self { mu, phi, power })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// Poisson rate of the number of gamma summands.
    pub fn poisson_rate(&self) -> f64 {
        self.mu.powf(2.0 - self.power) / (self.phi * (2.0 - self.power))
    }

    /// Shape of each gamma summand.
    pub fn gamma_shape(&self) -> f64 {
        (2.0 - self.power) / (self.power - 1.0)
    }

    /// Scale of each gamma summand.
    pub fn gamma_scale(&self) -> f64 {
        self.phi * (self.power - 1.0) * self.mu.powf(self.power - 1.0)
    }

    /// `Pr(Y = 0)`.
    pub fn pzero(&self) -> f64 {
        (-self.poisson_rate()).exp()
    }

    pub fn variance(&self) -> f64 {
        self.phi * self.mu.powf(self.power)
    }

    /// Hybrid density: the atom at `y = 0`, the continuous density for `y > 0`.
    pub fn density(&self, y: f64) -> Result<f64> {
        check_support(y)?;
        if y == 0.0 {
            return Ok(self.pzero());
        }
        Ok(self.ln_density_positive(y).exp())
    }

    /// Log of the continuous density at `y > 0`, summed as a series over the
    /// number of gamma summands starting from the dominant index.
    pub fn ln_density_positive(&self, y: f64) -> f64 {
        debug_assert!(y > 0.0);
        let lambda = self.poisson_rate();
        let alpha = self.gamma_shape();
        let scale = self.gamma_scale();
        let ln_lambda = lambda.ln();
        let ln_y = y.ln();
        let ln_scale = scale.ln();
        let term = |n: f64| -> f64 {
            let na = n * alpha;
            n * ln_lambda - ln_gamma(n + 1.0) - lambda + (na - 1.0) * ln_y
                - y / scale
                - ln_gamma(na)
                - na * ln_scale
        };

        // The log-terms are concave in n, so a local search finds the peak.
        let guess = y.powf(2.0 - self.power) / (self.phi * (2.0 - self.power));
        let mut peak = guess.round().max(1.0);
        let mut peak_val = term(peak);
        loop {
            let up = term(peak + 1.0);
            if up > peak_val {
                peak += 1.0;
                peak_val = up;
                continue;
            }
            if peak > 1.0 {
                let down = term(peak - 1.0);
                if down > peak_val {
                    peak -= 1.0;
                    peak_val = down;
                    continue;
                }
            }
            break;
        }

        let mut sum = 1.0;
        let mut n = peak + 1.0;
        for _ in 0..MAX_SERIES_TERMS {
            let r = (term(n) - peak_val).exp();
            sum += r;
            if r < SERIES_REL_TOL * sum {
                break;
            }
            n += 1.0;
        }
        let mut n = peak - 1.0;
        while n >= 1.0 {
            let r = (term(n) - peak_val).exp();
            sum += r;
            if r < SERIES_REL_TOL * sum {
                break;
            }
            n -= 1.0;
        }
        peak_val + sum.ln()
    }

    /// Distribution function `Pr(Y <= y)`, as the atom plus a Poisson mixture of
    /// regularized incomplete gamma functions.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        check_support(y)?;
        Ok(self.cdf_unchecked(y))
    }

    fn cdf_unchecked(&self, y: f64) -> f64 {
        let p0 = self.pzero();
        if y == 0.0 {
            return p0;
        }
        if y.is_infinite() {
            return 1.0;
        }
        let lambda = self.poisson_rate();
        let alpha = self.gamma_shape();
        let x = y / self.gamma_scale();
        let ln_lambda = lambda.ln();
        let weight = |n: f64| (n * ln_lambda - lambda - ln_gamma(n + 1.0)).exp();

        let mode = lambda.floor().max(1.0);
        let mut sum = 0.0;
        let mut n = mode;
        for _ in 0..MAX_SERIES_TERMS {
            let w = weight(n);
            let t = w * gamma_lr(n * alpha, x);
            sum += t;
            if w < 1e-17 * (sum + p0) || (t < 1e-17 * (sum + p0) && n > lambda) {
                break;
            }
            n += 1.0;
        }
        let mut n = mode - 1.0;
        while n >= 1.0 {
            let w = weight(n);
            sum += w * gamma_lr(n * alpha, x);
            if w < 1e-17 * (sum + p0) {
                break;
            }
            n -= 1.0;
        }
        (p0 + sum).min(1.0)
    }

    /// Smallest `y` with `cdf(y) >= u`: zero inside the atom, otherwise the
    /// root of `cdf(y) = u` by bracketing, bisection and safeguarded Newton.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("quantile level {u} outside (0, 1)")));
        }
        if u <= self.pzero() {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = self.mu.max(1e-300);
        let mut iters = 0;
        while self.cdf_unchecked(hi) < u {
            lo = hi;
            hi *= 2.0;
            iters += 1;
            if iters > 2000 {
                return Err(Error::Numerical(format!("could not bracket tweedie quantile {u}")));
            }
        }
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_unchecked(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut y = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.cdf_unchecked(y) - u;
            if f.abs() <= 1e-14 {
                break;
            }
            if f < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let d = self.ln_density_positive(y).exp();
            let mut next = y - f / d;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - y).abs() <= 1e-12 * (1.0 + y) || hi - lo <= 1e-15 * (1.0 + hi) {
                y = next;
                break;
            }
            y = next;
        }
        Ok(y)
    }

    pub fn triplet(&self, y: f64) -> Result<Triplet> {
        check_support(y)?;
        if y == 0.0 {
            let p0 = self.pzero();
            return Ok(Triplet { cdf: p0, cdf_left: 0.0, density: p0 });
        }
        let cdf = self.cdf_unchecked(y);
        Ok(Triplet { cdf, cdf_left: cdf, density: self.ln_density_positive(y).exp() })
    }

    /// One draw from the compound Poisson-gamma representation.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let lambda = self.poisson_rate();
        let count: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
        if count == 0.0 {
            return 0.0;
        }
        Gamma::new(count * self.gamma_shape(), self.gamma_scale())
            .expect("positive gamma parameters")
            .sample(rng)
    }
}

fn check_support(y: f64) -> Result<()> {
    if y >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("tweedie support is y >= 0, got {y}")))
    }
}
