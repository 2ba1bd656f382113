//! Closed-form correlation derivatives of trivariate Gaussian copula partials.
//!
//! `C_3` is `dC(u1, u2, u3)/du3` and `C_23` is `d^2C/du2 du3`. These serve as
//! independent checks of the general gradient engine and as fast paths.

use super::bvn::bvn_cdf;
use super::kernels::{density2_scores, dlog_density2};
use super::normal::{bvn_pdf, normal_score, std_normal_cdf, std_normal_pdf};
use crate::{Error, Result};

/// Correlation parameter of a trivariate copula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriParam {
    R12,
    R13,
    R23,
}

/// Trivariate correlation triple `(r12, r13, r23)`.
#[derive(Debug, Clone, Copy)]
pub struct TriCorr {
    pub r12: f64,
    pub r13: f64,
    pub r23: f64,
}

impl TriCorr {
    fn validate(&self) -> Result<()> {
        let det = 1.0 - self.r12 * self.r12 - self.r13 * self.r13 - self.r23 * self.r23
            + 2.0 * self.r12 * self.r13 * self.r23;
        if det <= 0.0 || [self.r12, self.r13, self.r23].iter().any(|r| r.abs() >= 1.0) {
            return Err(Error::NotPsd(format!("trivariate correlation {self:?}")));
        }
        Ok(())
    }
}

fn scores(u: [f64; 3]) -> Result<[f64; 3]> {
    if u.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::domain(format!("arguments {u:?} must lie in (0, 1)")));
    }
    Ok(u.map(normal_score))
}

/// `d Phi_2(x1, x2; r) / d x1`.
fn h(x1: f64, x2: f64, r: f64) -> f64 {
    std_normal_pdf(x1) * std_normal_cdf((x2 - r * x1) / (1.0 - r * r).sqrt())
}

/// `C_3(u) = dC/du3` at correlation `c`.
pub fn partial3(u: [f64; 3], c: TriCorr) -> Result<f64> {
    c.validate()?;
    let z = scores(u)?;
    let (s1, s2) = ((1.0 - c.r13 * c.r13).sqrt(), (1.0 - c.r23 * c.r23).sqrt());
    let rx = (c.r12 - c.r13 * c.r23) / (s1 * s2);
    Ok(bvn_cdf((z[0] - c.r13 * z[2]) / s1, (z[1] - c.r23 * z[2]) / s2, rx))
}

/// `d C_3 / d rho` for the chosen correlation.
pub fn drho_partial3(u: [f64; 3], c: TriCorr, which: TriParam) -> Result<f64> {
    c.validate()?;
    let z = scores(u)?;
    let (q1, q2) = (1.0 - c.r13 * c.r13, 1.0 - c.r23 * c.r23);
    let (s1, s2) = (q1.sqrt(), q2.sqrt());
    let x1 = (z[0] - c.r13 * z[2]) / s1;
    let x2 = (z[1] - c.r23 * z[2]) / s2;
    let num = c.r12 - c.r13 * c.r23;
    let rx = num / (s1 * s2);
    let (dx1, dx2, drx) = match which {
        TriParam::R12 => (0.0, 0.0, 1.0 / (s1 * s2)),
        TriParam::R13 => (
            (c.r13 * z[0] - z[2]) / (q1 * s1),
            0.0,
            (-c.r23 + num * c.r13 / q1) / (s1 * s2),
        ),
        TriParam::R23 => (
            0.0,
            (c.r23 * z[1] - z[2]) / (q2 * s2),
            (-c.r13 + num * c.r23 / q2) / (s1 * s2),
        ),
    };
    Ok(h(x1, x2, rx) * dx1 + h(x2, x1, rx) * dx2 + bvn_pdf(x1, x2, rx) * drx)
}

struct Cond23 {
    resid: f64,
    var: f64,
    dmu: f64,
    dvar: f64,
}

fn cond23(z: [f64; 3], c: TriCorr, which: TriParam) -> Cond23 {
    // A = [[1, r23], [r23, 1]], v = (r12, r13)
    let det = 1.0 - c.r23 * c.r23;
    let ainv = [[1.0 / det, -c.r23 / det], [-c.r23 / det, 1.0 / det]];
    let mul = |x: [f64; 2]| [ainv[0][0] * x[0] + ainv[0][1] * x[1], ainv[1][0] * x[0] + ainv[1][1] * x[1]];
    let v = [c.r12, c.r13];
    let az = mul([z[1], z[2]]);
    let av = mul(v);
    let mu = v[0] * az[0] + v[1] * az[1];
    let var = 1.0 - (v[0] * av[0] + v[1] * av[1]);
    // J = dA/dr23 swaps the two coordinates
    let (dmu, dvar) = match which {
        TriParam::R12 => (az[0], -2.0 * av[0]),
        TriParam::R13 => (az[1], -2.0 * av[1]),
        TriParam::R23 => (
            -(av[0] * az[1] + av[1] * az[0]),
            av[0] * av[1] + av[1] * av[0],
        ),
    };
    Cond23 { resid: z[0] - mu, var, dmu, dvar }
}

/// `C_23(u) = d^2 C / du2 du3`.
pub fn partial23(u: [f64; 3], c: TriCorr) -> Result<f64> {
    c.validate()?;
    let z = scores(u)?;
    let k = cond23(z, c, TriParam::R12);
    Ok(density2_scores(z[1], z[2], c.r23) * std_normal_cdf(k.resid / k.var.sqrt()))
}

/// `d C_23 / d rho` for the chosen correlation.
pub fn drho_partial23(u: [f64; 3], c: TriCorr, which: TriParam) -> Result<f64> {
    c.validate()?;
    let z = scores(u)?;
    let k = cond23(z, c, which);
    let sd = k.var.sqrt();
    let cond = std_normal_cdf(k.resid / sd);
    let dcond = -std_normal_pdf(k.resid / sd) * (k.var * k.dmu + 0.5 * k.resid * k.dvar)
        / (k.var * sd);
    let dens = density2_scores(z[1], z[2], c.r23);
    let ddens = if which == TriParam::R23 { dens * dlog_density2(z[1], z[2], c.r23) } else { 0.0 };
    Ok(dcond * dens + cond * ddens)
}
