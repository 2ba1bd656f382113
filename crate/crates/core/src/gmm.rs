//! Generic pairwise-likelihood and GMM machinery over per-subject stacked
//! moment vectors.
//!
//! Moment evaluation is a parallel map over subjects collected in subject
//! order; every reduction is a sequential sum in that order, so results do
//! not depend on the number of threads.

use std::sync::{Arc, Mutex};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Step for central-difference Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;
pub const PL_TOL: f64 = 1e-7;
pub const MAX_ITER: usize = 100;

/// A set of per-subject estimating functions `g_i(theta)`.
pub trait MomentModel: Sync {
    fn n_params(&self) -> usize;
    fn n_moments(&self) -> usize;
    fn n_subjects(&self) -> usize;
    /// Stacked moment vector of subject `i`; length [`n_moments`](Self::n_moments).
    fn subject_moments(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>>;
    /// Whether `theta` lies in the parameter space (interior, PSD).
    fn admissible(&self, theta: &[f64]) -> bool;
    /// The `r x M` matrix `B` such that `sum_i B g_i = 0` is the pairwise
    /// likelihood estimating equation.
    fn pl_map(&self) -> DMatrix<f64>;
    /// Moment components that are identically zero by construction.
    fn structural_zeros(&self) -> Vec<bool> {
        vec![false; self.n_moments()]
    }
    /// All subjects' moments as an `n x M` matrix.
    fn moments(&self, theta: &[f64]) -> Result<Arc<DMatrix<f64>>> {
        compute_moments(self, theta).map(Arc::new)
    }
}

/// All subjects' moments as an `n x M` matrix.
pub fn moment_matrix<M: MomentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(model.moments(theta)?.as_ref().clone())
}

fn compute_moments<M: MomentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = (0..model.n_subjects())
        .into_par_iter()
        .map(|i| model.subject_moments(i, theta))
        .collect::<Result<_>>()?;
    let mm = model.n_moments();
    let mut g = DMatrix::zeros(rows.len(), mm);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != mm || r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite moment vector for subject {i}")));
        }
        for (k, v) in r.iter().enumerate() {
            g[(i, k)] = *v;
        }
    }
    Ok(g)
}

/// Column means in row order.
fn mean_moments(g: &DMatrix<f64>) -> DVector<f64> {
    let n = g.nrows() as f64;
    let mut out = DVector::zeros(g.ncols());
    for i in 0..g.nrows() {
        for k in 0..g.ncols() {
            out[k] += g[(i, k)];
        }
    }
    out / n
}

/// Plug-in variance `n^{-1} sum_i g_i g_i^T`.
pub fn plugin_variance(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows() as f64;
    let mm = g.ncols();
    let mut v = DMatrix::zeros(mm, mm);
    for i in 0..g.nrows() {
        for a in 0..mm {
            let ga = g[(i, a)];
            if ga == 0.0 {
                continue;
            }
            for b in 0..=a {
                v[(a, b)] += ga * g[(i, b)];
            }
        }
    }
    v.fill_upper_triangle_with_lower_triangle();
    v / n
}

fn mean_at<M: MomentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<DVector<f64>> {
    let g = model.moments(theta)?;
    Ok(mean_moments(&g))
}

/// Central-difference Jacobian `d gbar / d theta` (`M x r`).
pub fn moment_jacobian<M: MomentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    let r = theta.len();
    let mut jac = DMatrix::zeros(model.n_moments(), r);
    for a in 0..r {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[a] += JACOBIAN_STEP;
        tm[a] -= JACOBIAN_STEP;
        let col = (mean_at(model, &tp)? - mean_at(model, &tm)?) / (2.0 * JACOBIAN_STEP);
        jac.set_column(a, &col);
    }
    Ok(jac)
}

#[derive(Debug, Clone, Serialize)]
pub struct PlResult {
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// Max-norm of `sum_i B g_i` at the solution.
    pub grad_norm: f64,
}

/// Solve `sum_i B g_i(theta) = 0` by Newton's method with a numerical
/// Jacobian and step halving that keeps the iterate admissible. The Jacobian
/// is kept between iterations while the residual falls at least tenfold.
pub fn solve_pl<M: MomentModel + ?Sized>(model: &M, init: &[f64]) -> Result<PlResult> {
    if !model.admissible(init) {
        return Err(Error::domain(format!("starting value {init:?} is not admissible")));
    }
    let b = model.pl_map();
    let n = model.n_subjects() as f64;
    let eq = |theta: &[f64]| -> Result<DVector<f64>> { Ok(&b * mean_at(model, theta)? * n) };
    let mut theta = init.to_vec();
    let mut f = eq(&theta)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut jac: Option<DMatrix<f64>> = None;
    for iter in 0..MAX_ITER {
        let norm = f.amax();
        if trace.last().is_some_and(|&prev| norm > 0.1 * prev) {
            jac = None;
        }
        trace.push(norm);
        if norm < PL_TOL {
            return Ok(PlResult { theta, iterations: iter, grad_norm: norm });
        }
        // a kept Jacobian gets one retry with a fresh one before giving up
        let mut stepped = None;
        for _ in 0..2 {
            let fresh = jac.is_none();
            if fresh {
                jac = Some(&b * moment_jacobian(model, &theta)? * n);
            }
            let step = jac
                .as_ref()
                .unwrap()
                .clone()
                .lu()
                .solve(&(-&f))
                .ok_or_else(|| Error::Numerical("singular pairwise Jacobian".into()))?;
            stepped = halve_until_better(model, &eq, &theta, &step, norm);
            if stepped.is_some() || fresh {
                break;
            }
            jac = None;
        }
        match stepped {
            Some((t, ft)) => {
                theta = t;
                f = ft;
            }
            None => break,
        }
    }
    Err(Error::Convergence(format!(
        "pairwise estimating equations did not converge; |score| trace {:?}",
        trace
    )))
}

fn halve_until_better<M, F>(
    model: &M,
    eq: &F,
    theta: &[f64],
    step: &DVector<f64>,
    norm: f64,
) -> Option<(Vec<f64>, DVector<f64>)>
where
    M: MomentModel + ?Sized,
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let mut t = 1.0;
    for _ in 0..40 {
        let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
        if model.admissible(&trial) {
            if let Ok(ft) = eq(&trial) {
                if ft.amax() < norm || t < 1e-6 && ft.amax() <= norm * 1.0001 {
                    return Some((trial, ft));
                }
            }
        }
        t *= 0.5;
    }
    None
}

/// Remembers the most recent moment matrices by exact `theta`, so the
/// pairwise covariance, the weight and the first Gauss-Newton step reuse the
/// evaluations made at the pairwise estimate.
pub struct Memo<'a, M: ?Sized> {
    inner: &'a M,
    cache: Mutex<Vec<(Vec<f64>, Arc<DMatrix<f64>>)>>,
}

const MEMO_SIZE: usize = 16;

impl<'a, M: MomentModel + ?Sized> Memo<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Memo { inner, cache: Mutex::new(Vec::new()) }
    }
}

impl<M: MomentModel + ?Sized> MomentModel for Memo<'_, M> {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn n_moments(&self) -> usize {
        self.inner.n_moments()
    }
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }
    fn subject_moments(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        self.inner.subject_moments(i, theta)
    }
    fn admissible(&self, theta: &[f64]) -> bool {
        self.inner.admissible(theta)
    }
    fn pl_map(&self) -> DMatrix<f64> {
        self.inner.pl_map()
    }
    fn structural_zeros(&self) -> Vec<bool> {
        self.inner.structural_zeros()
    }
    fn moments(&self, theta: &[f64]) -> Result<Arc<DMatrix<f64>>> {
        let hit = |c: &Vec<(Vec<f64>, Arc<DMatrix<f64>>)>| {
            c.iter().find(|(t, _)| t.as_slice() == theta).map(|(_, g)| g.clone())
        };
        if let Some(g) = hit(&self.cache.lock().unwrap()) {
            return Ok(g);
        }
        let g = self.inner.moments(theta)?;
        let mut c = self.cache.lock().unwrap();
        if c.len() == MEMO_SIZE {
            c.remove(0);
        }
        c.push((theta.to_vec(), g.clone()));
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weight fixed at the starting value.
    OneStep,
    /// Re-estimate the weight at each new estimate until it settles.
    Iterated,
}

#[derive(Debug, Clone, Serialize)]
pub struct GmmResult {
    pub theta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    /// Over-identification statistic `n gbar^T W gbar`.
    pub j_stat: f64,
    /// `r * (#pairs) - r`, counting every stacked component.
    pub df: usize,
    /// Non-structural moments minus parameters.
    pub effective_df: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Ridge added to the plug-in variance, if it was singular.
    pub ridge: Option<f64>,
}

impl GmmResult {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let r = self.theta.len();
        DMatrix::from_fn(r, r, |a, b| self.covariance[a][b])
    }
}

struct Weight {
    active: Vec<usize>,
    w: DMatrix<f64>,
    ridge: Option<f64>,
}

fn weight_matrix(g: &DMatrix<f64>, zeros: &[bool]) -> Result<Weight> {
    let active: Vec<usize> = (0..g.ncols())
        .filter(|&k| !zeros[k] && g.column(k).iter().any(|v| *v != 0.0))
        .collect();
    if active.is_empty() {
        return Err(Error::Numerical("all moments vanish".into()));
    }
    let v = plugin_variance(&g.select_columns(&active));
    let (w, ridge) = invert_with_ridge(&v)?;
    Ok(Weight { active, w, ridge })
}

/// Inverse of a symmetric PSD matrix, adding a growing ridge when it is
/// numerically singular.
pub fn invert_with_ridge(v: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<f64>)> {
    let scale = v.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let well_conditioned = |m: &DMatrix<f64>| {
        let e = m.clone().symmetric_eigen().eigenvalues;
        e.min() > 1e-12 * e.max()
    };
    if well_conditioned(v) {
        if let Some(ch) = v.clone().cholesky() {
            return Ok((ch.inverse(), None));
        }
    }
    let mut eps = 1e-10 * scale;
    for _ in 0..12 {
        let vr = v + DMatrix::identity(v.nrows(), v.ncols()) * eps;
        if well_conditioned(&vr) {
            if let Some(ch) = vr.cholesky() {
                warn!("plug-in variance is singular; added ridge {eps:e}");
                return Ok((ch.inverse(), Some(eps)));
            }
        }
        eps *= 10.0;
    }
    Err(Error::Numerical("weight matrix could not be regularized".into()))
}

// Fisher-z step below which Gauss-Newton stops.
const STEP_TOL: f64 = 1e-10;

fn to_z(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| t.atanh()).collect()
}

fn from_z(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.tanh()).collect()
}

/// GMM with the plug-in weight evaluated at `theta_init`, minimized by
/// Gauss-Newton in Fisher-z coordinates with step halving.
pub fn fit_gmm<M: MomentModel + ?Sized>(
    model: &M,
    theta_init: &[f64],
    mode: WeightMode,
) -> Result<GmmResult> {
    let r = model.n_params();
    let n = model.n_subjects() as f64;
    if !model.admissible(theta_init) {
        return Err(Error::domain("GMM starting value is not admissible"));
    }
    let zeros = model.structural_zeros();
    let mut weight = weight_matrix(&moment_matrix(model, theta_init)?, &zeros)?;
    let mut theta = theta_init.to_vec();
    let mut total_iter = 0;
    let mut converged = false;
    for _round in 0..if mode == WeightMode::Iterated { 20 } else { 1 } {
        let (t, it, conv) = gauss_newton(model, &theta, &weight)?;
        total_iter += it;
        converged = conv;
        let shift = t.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        theta = t;
        if mode == WeightMode::OneStep || shift < 1e-8 {
            break;
        }
        weight = weight_matrix(&moment_matrix(model, &theta)?, &zeros)?;
    }
    let gbar = mean_at(model, &theta)?.select_rows(&weight.active);
    let jac = moment_jacobian(model, &theta)?.select_rows(&weight.active);
    let info = jac.transpose() * &weight.w * &jac;
    let cov = info
        .try_inverse()
        .ok_or_else(|| Error::Numerical("GMM information matrix is singular".into()))?
        / n;
    let j_stat = n * (gbar.transpose() * &weight.w * &gbar)[(0, 0)];
    let pairs_total = model.n_moments();
    info!("GMM finished after {total_iter} iterations, J = {j_stat:.4}");
    Ok(GmmResult {
        std_errors: (0..r).map(|a| cov[(a, a)].max(0.0).sqrt()).collect(),
        covariance: (0..r).map(|a| (0..r).map(|b| cov[(a, b)]).collect()).collect(),
        theta,
        j_stat,
        df: pairs_total - r,
        effective_df: weight.active.len().saturating_sub(r),
        iterations: total_iter,
        converged,
        ridge: weight.ridge,
    })
}

// Gauss-Newton alone converges only linearly when the moments are
// over-identified, since the residual curvature sum_k (W g)_k d2 g_k is
// dropped. That term is tracked with a symmetric rank-one secant update
// built from successive Jacobians.
fn gauss_newton<M: MomentModel + ?Sized>(
    model: &M,
    start: &[f64],
    weight: &Weight,
) -> Result<(Vec<f64>, usize, bool)> {
    let objective = |theta: &[f64]| -> Result<(f64, DVector<f64>)> {
        let g = mean_at(model, theta)?.select_rows(&weight.active);
        Ok(((g.transpose() * &weight.w * &g)[(0, 0)], g))
    };
    let r = start.len();
    let mut theta = start.to_vec();
    let mut z = to_z(start);
    let (mut q, mut g) = objective(start)?;
    let mut curv = DMatrix::<f64>::zeros(r, r);
    let mut prev: Option<(DVector<f64>, DMatrix<f64>)> = None;
    for iter in 0..MAX_ITER {
        // chain rule into Fisher-z coordinates
        let mut jz = moment_jacobian(model, &theta)?.select_rows(&weight.active);
        for a in 0..r {
            let d = 1.0 - theta[a] * theta[a];
            jz.column_mut(a).scale_mut(d);
        }
        let wg = &weight.w * &g;
        if let Some((s, jz_old)) = prev.take() {
            let y = (&jz - jz_old).transpose() * &wg;
            let u = y - &curv * &s;
            let den = u.dot(&s);
            if den.abs() > 1e-8 * u.norm() * s.norm() {
                curv += &u * u.transpose() / den;
            }
        }
        let grad = jz.transpose() * &wg;
        if grad.amax() < 1e-12 * (1.0 + q) || q < 1e-30 {
            return Ok((theta, iter, true));
        }
        let gn = jz.transpose() * &weight.w * &jz;
        let solve = |h: DMatrix<f64>| h.cholesky().map(|c| c.solve(&(-&grad)));
        let step = match solve(&gn + &curv) {
            Some(st) if st.dot(&grad) < 0.0 => st,
            _ => {
                curv.fill(0.0);
                gn.lu()
                    .solve(&(-&grad))
                    .ok_or_else(|| Error::Numerical("singular Gauss-Newton system".into()))?
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let zt: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let tt = from_z(&zt);
            if model.admissible(&tt) {
                if let Ok((qt, gt)) = objective(&tt) {
                    if qt <= q {
                        z = zt;
                        theta = tt;
                        q = qt;
                        g = gt;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // no descent possible: stationary up to rounding
            return Ok((theta, iter + 1, grad.amax() < 1e-6 * (1.0 + q)));
        }
        if t * step.amax() < STEP_TOL {
            return Ok((theta, iter + 1, true));
        }
        prev = Some((step * t, jz));
    }
    Ok((theta, MAX_ITER, false))
}

/// Efficient GMM covariance `n^{-1} (G^T W G)^{-1}` with the plug-in weight
/// and Jacobian both evaluated at `theta`.
pub fn gmm_covariance<M: MomentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    let n = model.n_subjects() as f64;
    let weight = weight_matrix(&moment_matrix(model, theta)?, &model.structural_zeros())?;
    let jac = moment_jacobian(model, theta)?.select_rows(&weight.active);
    (jac.transpose() * &weight.w * &jac)
        .try_inverse()
        .map(|m| m / n)
        .ok_or_else(|| Error::Numerical("GMM information matrix is singular".into()))
}

/// Sandwich covariance of the pairwise estimator,
/// `n^{-1} (G^T B^T (B V B^T)^{-1} B G)^{-1}`.
pub fn pl_covariance<M: MomentModel + ?Sized>(model: &M, theta: &[f64]) -> Result<DMatrix<f64>> {
    let n = model.n_subjects() as f64;
    let b = model.pl_map();
    let v = plugin_variance(&moment_matrix(model, theta)?);
    let jac = moment_jacobian(model, theta)?;
    let bg = &b * jac;
    let bvb = &b * v * b.transpose();
    let inner = bvb
        .try_inverse()
        .ok_or_else(|| Error::Numerical("pairwise score variance is singular".into()))?;
    (bg.transpose() * inner * bg)
        .try_inverse()
        .map(|m| m / n)
        .ok_or_else(|| Error::Numerical("pairwise sensitivity is singular".into()))
}
