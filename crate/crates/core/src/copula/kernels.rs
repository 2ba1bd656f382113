//! Gaussian copula functions and their derivatives with respect to the
//! correlation entries.
//!
//! Every copula quantity here is a conditional orthant probability of the
//! latent normal vector: the copula itself conditions on nothing, the first
//! partial `C_j` conditions on coordinate `j`, and the mixed partial `C_jk` is
//! the bivariate copula density times the probability conditional on `j, k`.
//! Gradients follow by the chain rule through the standardized conditional
//! limits and the conditional correlation matrix, using the `h_{1,d}` and
//! `h_{2,d}` functions of the reduced problem.

use nalgebra::DMatrix;

use super::corr::{AssocMatrix, CorrMatrix};
use super::mvn::phi_d;
use super::normal::{bvn_pdf, normal_score, std_normal_cdf, std_normal_pdf};
use crate::{Error, Result};

const MIN_COND_VAR: f64 = 1e-12;

/// Which copula partial derivative to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partial {
    /// The copula distribution function itself.
    None,
    /// `dC / du_j`.
    One(usize),
    /// `d^2 C / du_j du_k`.
    Two(usize, usize),
}

/// Value and, optionally, the symmetric matrix of derivatives with respect to
/// each off-diagonal correlation `R_ab` (entry `(a, b)` and `(b, a)` hold the
/// same number; the diagonal is zero).
#[derive(Debug, Clone)]
pub struct WithGrad {
    pub value: f64,
    pub grad: Option<DMatrix<f64>>,
}

/// `Pr(Z_rest <= z_rest | Z_given = z_given)` for `Z ~ N(0, R)`; coordinates
/// with `z = +inf` are dropped.
pub(crate) fn conditional_prob(
    z: &[f64],
    r: &DMatrix<f64>,
    given: &[usize],
    with_grad: bool,
) -> Result<WithGrad> {
    let d = z.len();
    let rest: Vec<usize> =
        (0..d).filter(|i| !given.contains(i) && z[*i] != f64::INFINITY).collect();
    let zero_grad = || with_grad.then(|| DMatrix::zeros(d, d));
    if rest.iter().any(|&i| z[i] == f64::NEG_INFINITY) {
        return Ok(WithGrad { value: 0.0, grad: zero_grad() });
    }
    if rest.is_empty() {
        return Ok(WithGrad { value: 1.0, grad: zero_grad() });
    }
    let nr = rest.len();
    let ng = given.len();
    let a_inv = if ng == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let a = DMatrix::from_fn(ng, ng, |i, j| r[(given[i], given[j])]);
        a.try_inverse().ok_or_else(|| Error::NotPsd("singular conditioning block".into()))?
    };
    let b = DMatrix::from_fn(nr, ng, |i, j| r[(rest[i], given[j])]);
    let zg = nalgebra::DVector::from_fn(ng, |i, _| z[given[i]]);
    let ainv_z = &a_inv * &zg;
    let mu = &b * &ainv_z;
    let ba = &b * &a_inv;
    let s = DMatrix::from_fn(nr, nr, |i, j| r[(rest[i], rest[j])]) - &ba * b.transpose();

    let mut sd = vec![0.0; nr];
    for k in 0..nr {
        if s[(k, k)] < MIN_COND_VAR {
            return Err(Error::NotPsd(format!(
                "conditional variance {:e} of coordinate {}",
                s[(k, k)],
                rest[k]
            )));
        }
        sd[k] = s[(k, k)].sqrt();
    }
    let xs: Vec<f64> = (0..nr).map(|k| (z[rest[k]] - mu[k]) / sd[k]).collect();
    let rc = DMatrix::from_fn(nr, nr, |i, j| if i == j { 1.0 } else { s[(i, j)] / (sd[i] * sd[j]) });
    let value = phi_d(&xs, &rc)?;
    if !with_grad {
        return Ok(WithGrad { value, grad: None });
    }

    // h-functions of the standardized conditional problem
    let mut h1 = vec![0.0; nr];
    let mut h2 = DMatrix::<f64>::zeros(nr, nr);
    for k in 0..nr {
        h1[k] = std_normal_pdf(xs[k]) * conditional_prob(&xs, &rc, &[k], false)?.value;
        for l in k + 1..nr {
            let v = bvn_pdf(xs[k], xs[l], rc[(k, l)]) * conditional_prob(&xs, &rc, &[k, l], false)?.value;
            h2[(k, l)] = v;
        }
    }

    let pos = |set: &[usize], i: usize| set.iter().position(|&v| v == i);
    let mut grad = DMatrix::<f64>::zeros(d, d);
    let mut dmu = vec![0.0; nr];
    let mut ds = DMatrix::<f64>::zeros(nr, nr);
    for a in 0..d {
        for bb in a + 1..d {
            dmu.iter_mut().for_each(|v| *v = 0.0);
            ds.fill(0.0);
            match (pos(given, a), pos(given, bb), pos(&rest, a), pos(&rest, bb)) {
                (Some(ga), Some(gb), _, _) => {
                    // d(A^{-1}) = -A^{-1} dA A^{-1}, dA = E_ab + E_ba
                    let mut da = DMatrix::<f64>::zeros(ng, ng);
                    da[(ga, gb)] = 1.0;
                    da[(gb, ga)] = 1.0;
                    let dainv = -(&a_inv * da * &a_inv);
                    let dm = &b * (&dainv * &zg);
                    for k in 0..nr {
                        dmu[k] = dm[k];
                    }
                    ds = -(&b * dainv * b.transpose());
                }
                (Some(g), None, None, Some(rk)) | (None, Some(g), Some(rk), None) => {
                    dmu[rk] = ainv_z[g];
                    for l in 0..nr {
                        ds[(rk, l)] -= ba[(l, g)];
                        ds[(l, rk)] -= ba[(l, g)];
                    }
                }
                (None, None, Some(ra), Some(rb)) => {
                    ds[(ra, rb)] = 1.0;
                    ds[(rb, ra)] = 1.0;
                }
                _ => continue,
            }
            let mut total = 0.0;
            for k in 0..nr {
                let var = s[(k, k)];
                let dx = -dmu[k] / sd[k] - 0.5 * (z[rest[k]] - mu[k]) * ds[(k, k)] / (var * sd[k]);
                total += h1[k] * dx;
                for l in k + 1..nr {
                    let drc = ds[(k, l)] / (sd[k] * sd[l])
                        - 0.5 * rc[(k, l)] * (ds[(k, k)] / var + ds[(l, l)] / s[(l, l)]);
                    total += h2[(k, l)] * drc;
                }
            }
            grad[(a, bb)] = total;
            grad[(bb, a)] = total;
        }
    }
    Ok(WithGrad { value, grad: Some(grad) })
}

/// Copula distribution function or partial derivative at normal scores `z`
/// (with `+inf` for arguments equal to one), optionally with the gradient in
/// the correlation entries.
pub(crate) fn copula_term(
    z: &[f64],
    r: &DMatrix<f64>,
    partial: Partial,
    with_grad: bool,
) -> Result<WithGrad> {
    match partial {
        Partial::None => conditional_prob(z, r, &[], with_grad),
        Partial::One(j) => conditional_prob(z, r, &[j], with_grad),
        Partial::Two(j, k) => {
            let rho = r[(j, k)];
            let dens = density2_scores(z[j], z[k], rho);
            let cond = conditional_prob(z, r, &[j, k], with_grad)?;
            let grad = cond.grad.map(|mut g| {
                g *= dens;
                let extra = dens * dlog_density2(z[j], z[k], rho) * cond.value;
                g[(j, k)] += extra;
                g[(k, j)] += extra;
                g
            });
            Ok(WithGrad { value: dens * cond.value, grad })
        }
    }
}

fn check_unit(u: &[f64]) -> Result<()> {
    if let Some(v) = u.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::domain(format!("copula argument {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_interior(u: f64, what: &str) -> Result<()> {
    if u > 0.0 && u < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} = {u} must lie in (0, 1)")))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("correlation {rho} is degenerate")))
    }
}

fn scores(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&v| normal_score(v)).collect()
}

/// `C(u; Sigma) = Phi_d(Phi^{-1}(u); R(Sigma))`.
pub fn copula_cdf(u: &[f64], sigma: &AssocMatrix) -> Result<f64> {
    check_dim(u.len(), sigma)?;
    check_unit(u)?;
    if u.iter().any(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let r = sigma.correlation();
    Ok(conditional_prob(&scores(u), r.as_matrix(), &[], false)?.value)
}

fn check_dim(n: usize, sigma: &AssocMatrix) -> Result<()> {
    if n == sigma.dim() {
        Ok(())
    } else {
        Err(Error::domain(format!("{n} arguments for a {}-dim copula", sigma.dim())))
    }
}

/// Bivariate conditional distribution `dC(u1, u2)/du2 = Pr(U1 <= u1 | U2 = u2)`.
pub fn copula_h1(u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    check_unit(&[u1])?;
    check_interior(u2, "conditioning argument")?;
    Ok(h_scores(normal_score(u1), normal_score(u2), rho))
}

pub(crate) fn h_scores(z1: f64, z2: f64, rho: f64) -> f64 {
    std_normal_cdf((z1 - rho * z2) / (1.0 - rho * rho).sqrt())
}

/// Bivariate Gaussian copula density.
pub fn copula_density2(u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    check_interior(u1, "u1")?;
    check_interior(u2, "u2")?;
    Ok(density2_scores(normal_score(u1), normal_score(u2), rho))
}

pub(crate) fn density2_scores(z1: f64, z2: f64, rho: f64) -> f64 {
    let om = 1.0 - rho * rho;
    (-0.5 * om.ln() - (rho * rho * (z1 * z1 + z2 * z2) - 2.0 * rho * z1 * z2) / (2.0 * om)).exp()
}

/// `d/drho log c(u1, u2; rho)` at normal scores.
pub(crate) fn dlog_density2(z1: f64, z2: f64, rho: f64) -> f64 {
    let om = 1.0 - rho * rho;
    rho / om + (z1 * z2 * (1.0 + rho * rho) - rho * (z1 * z1 + z2 * z2)) / (om * om)
}

/// `dC(u1, u2)/drho = phi_2(z1, z2; rho)`.
pub fn drho_copula_cdf2(u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    check_unit(&[u1, u2])?;
    Ok(bvn_pdf(normal_score(u1), normal_score(u2), rho))
}

/// `d/drho` of the bivariate h-function `dC(u1, u2)/du2`.
pub fn drho_copula_h(u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    check_unit(&[u1])?;
    check_interior(u2, "conditioning argument")?;
    Ok(drho_h_scores(normal_score(u1), normal_score(u2), rho))
}

pub(crate) fn drho_h_scores(z1: f64, z2: f64, rho: f64) -> f64 {
    if z1.is_infinite() {
        return 0.0;
    }
    let om = 1.0 - rho * rho;
    std_normal_pdf((z1 - rho * z2) / om.sqrt()) * (rho * z1 - z2) / (om * om.sqrt())
}

/// First partial `dC/du_j` of a `d`-dimensional Gaussian copula.
pub fn copula_partial_md(u: &[f64], sigma: &AssocMatrix, j: usize) -> Result<f64> {
    check_dim(u.len(), sigma)?;
    check_unit(u)?;
    check_interior(u[j], "differentiated argument")?;
    if u.iter().any(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let r = sigma.correlation();
    Ok(copula_term(&scores(u), r.as_matrix(), Partial::One(j), false)?.value)
}

/// Mixed partial `d^2 C / du_j du_k`.
pub fn copula_partial2_md(u: &[f64], sigma: &AssocMatrix, j: usize, k: usize) -> Result<f64> {
    check_dim(u.len(), sigma)?;
    check_unit(u)?;
    check_interior(u[j], "differentiated argument")?;
    check_interior(u[k], "differentiated argument")?;
    if j == k {
        return Err(Error::domain("mixed partial needs two distinct arguments"));
    }
    if u.iter().any(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let r = sigma.correlation();
    Ok(copula_term(&scores(u), r.as_matrix(), Partial::Two(j, k), false)?.value)
}

/// `h_{1,d}^{(k)}(x; R) = dPhi_d(x; R)/dx_k`.
pub fn h1_d(x: &[f64], r: &CorrMatrix, k: usize) -> Result<f64> {
    if x.len() != r.dim() || k >= x.len() {
        return Err(Error::domain("index or dimension mismatch"));
    }
    Ok(std_normal_pdf(x[k]) * conditional_prob(x, r.as_matrix(), &[k], false)?.value)
}

/// `h_{2,d}^{(ij)}(x; Sigma) = dPhi_d(x; R(Sigma))/dR_ij`.
pub fn h2_d(x: &[f64], sigma: &AssocMatrix, i: usize, j: usize) -> Result<f64> {
    check_dim(x.len(), sigma)?;
    if i == j || i >= x.len() || j >= x.len() {
        return Err(Error::domain("h2 needs two distinct valid indices"));
    }
    let r = sigma.correlation();
    let rm = r.as_matrix();
    Ok(bvn_pdf(x[i], x[j], rm[(i, j)]) * conditional_prob(x, rm, &[i, j], false)?.value)
}

/// Full gradient of `Phi_d(x; R)` in the correlation entries.
pub fn mvn_cdf_grad(x: &[f64], r: &CorrMatrix) -> Result<WithGrad> {
    conditional_prob(x, r.as_matrix(), &[], true)
}

fn pair_grad(grad: Option<DMatrix<f64>>, pair: (usize, usize)) -> Result<f64> {
    let g = grad.expect("gradient requested");
    if pair.0 == pair.1 || pair.0 >= g.nrows() || pair.1 >= g.nrows() {
        return Err(Error::domain(format!("invalid association index {pair:?}")));
    }
    Ok(g[(pair.0, pair.1)])
}

/// `d C_j(u) / d R_ab` for the association entry `pair = (a, b)`.
pub fn drho_partial_copula(
    u: &[f64],
    sigma: &AssocMatrix,
    j: usize,
    pair: (usize, usize),
) -> Result<f64> {
    check_dim(u.len(), sigma)?;
    check_unit(u)?;
    check_interior(u[j], "differentiated argument")?;
    let r = sigma.correlation();
    check_pair_rho(&r, pair)?;
    let out = copula_term(&scores(u), r.as_matrix(), Partial::One(j), true)?;
    pair_grad(out.grad, pair)
}

/// `d C_jk(u) / d R_ab`.
pub fn drho_partial2_copula(
    u: &[f64],
    sigma: &AssocMatrix,
    j: usize,
    k: usize,
    pair: (usize, usize),
) -> Result<f64> {
    check_dim(u.len(), sigma)?;
    check_unit(u)?;
    check_interior(u[j], "differentiated argument")?;
    check_interior(u[k], "differentiated argument")?;
    let r = sigma.correlation();
    check_pair_rho(&r, pair)?;
    let out = copula_term(&scores(u), r.as_matrix(), Partial::Two(j, k), true)?;
    pair_grad(out.grad, pair)
}

fn check_pair_rho(r: &CorrMatrix, pair: (usize, usize)) -> Result<()> {
    if pair.0 < r.dim() && pair.1 < r.dim() && pair.0 != pair.1 {
        check_rho(r.get(pair.0, pair.1))
    } else {
        Err(Error::domain(format!("invalid association index {pair:?}")))
    }
}
