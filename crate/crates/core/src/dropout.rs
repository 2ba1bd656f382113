//! Estimation under informative dropout.
//!
//! A subject with lapse time `T = t` is observed in periods `1..=min(t, m)`.
//! For every outcome pair `(j, k)` and observed period `s`, the contribution
//! is the conditional hybrid density of `(Y_js, Y_ks)` given `T = t`. Its
//! numerator is an `(m+2)`-dimensional normal probability: lapse scores before
//! `t` lie below `Phi^{-1}(F_L(0))` and, when `t <= m`, the score at `t` lies
//! above it.
//!
//! With every stream independent over time the lapse coordinates away from
//! period `s` factor out and only a three-dimensional copula remains.

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::copula::{
    copula_term, default_tol, mvn_cdf, normal_score, select, CorrMatrix, Partial, U_CLAMP,
};
use crate::distributions::Triplet;
use crate::estimation::{DENSITY_FLOOR, MIN_ATOM};
use crate::gmm::{self, GmmResult, MomentModel, PlResult, WeightMode};
use crate::marginal::MarginalModel;
use crate::panel::PanelDataset;
use crate::temporal::{dcorrelation, pairs, AssociationParams, ParamId};
use crate::{Error, Result};

/// Observation of one subject prepared for the dropout likelihood.
#[derive(Debug, Clone)]
pub struct SubjectObs {
    /// Lapse time `T` in `1..=m+1`.
    pub t: usize,
    /// `F_L(0)` for each observed period.
    pub fl0: Vec<f64>,
    /// Marginal triplets `trip[s][j]` for each observed period.
    pub trip: Vec<Vec<Triplet>>,
}

impl SubjectObs {
    /// Evaluate marginal models on every subject of a panel.
    pub fn from_panel(
        data: &PanelDataset,
        lapse: &MarginalModel,
        outcomes: &[MarginalModel],
    ) -> Result<Vec<SubjectObs>> {
        if outcomes.len() != data.p() {
            return Err(Error::Data(format!("{} outcome models for {} outcomes", outcomes.len(), data.p())));
        }
        data.subjects
            .iter()
            .map(|s| {
                let fl0 = s.x.iter().map(|x| lapse.cdf_zero(x)).collect::<Result<Vec<_>>>()?;
                let trip = s
                    .x
                    .iter()
                    .zip(&s.y)
                    .map(|(x, y)| outcomes.iter().zip(y).map(|(m, v)| m.triplet(x, *v)).collect())
                    .collect::<Result<Vec<_>>>()?;
                Ok(SubjectObs { t: s.lapse_time(data.m), fl0, trip })
            })
            .collect()
    }
}

fn check_fl0(fl0: &[f64], needed: usize) -> Result<()> {
    if fl0.len() < needed {
        return Err(Error::domain(format!("{} lapse probabilities given, {needed} needed", fl0.len())));
    }
    if let Some(v) = fl0[..needed].iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::domain(format!("F_L(0) = {v} must lie in (0, 1)")));
    }
    Ok(())
}

fn lapse_scores(fl0: &[f64], t: usize, m: usize, lower: bool) -> Vec<f64> {
    (0..m)
        .map(|tau| {
            if tau + 1 < t || (lower && tau + 1 == t) {
                normal_score(fl0[tau])
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Signed survival terms whose difference is `Pr(T = t)`.
fn lapse_configs(fl0: &[f64], t: usize, m: usize) -> Vec<(f64, Vec<f64>)> {
    let mut out = vec![(1.0, lapse_scores(fl0, t, m, false))];
    if t <= m {
        out.push((-1.0, lapse_scores(fl0, t, m, true)));
    }
    out
}

/// `Pr(T = t)` for a subject with lapse-zero probabilities `fl0` (one per
/// period, at least `min(t, m)` of them). Written as a difference of
/// survival terms so the law sums to one exactly over `t`.
pub fn lapse_time_prob(t: usize, fl0: &[f64], params: &AssociationParams) -> Result<f64> {
    let m = params.m();
    if t == 0 || t > m + 1 {
        return Err(Error::domain(format!("lapse time {t} outside 1..={}", m + 1)));
    }
    check_fl0(fl0, t.min(m))?;
    if params.lapse.is_independence() {
        let stay: f64 = fl0[..t - 1].iter().product();
        return Ok(if t <= m { stay * (1.0 - fl0[t - 1]) } else { stay });
    }
    let sigma = params.sigma_full()?.correlation();
    let r = CorrMatrix::new(select(sigma.as_matrix(), &(0..m).collect::<Vec<_>>()))?;
    let mut total = 0.0;
    for (sign, z) in lapse_configs(fl0, t, m) {
        let d = z.iter().filter(|v| v.is_finite()).count();
        total += sign * mvn_cdf(&z, &r, default_tol(d))?.value;
    }
    Ok(total)
}

/// Parameters of one conditional pair cell.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub j: usize,
    pub k: usize,
    /// Observation period, 1-based.
    pub s: usize,
    /// Lapse time.
    pub t: usize,
}

impl Cell {
    fn validate(&self, m: usize) -> Result<()> {
        if self.t == 0 || self.t > m + 1 || self.s == 0 || self.s > self.t.min(m) {
            return Err(Error::domain(format!("cell {self:?} violates s <= min(t, m)")));
        }
        Ok(())
    }
}

/// Conditional density value and score in the requested parameters.
#[derive(Debug, Clone)]
pub struct CellEval {
    pub density: f64,
    pub score: Vec<f64>,
    pub floored: bool,
}

/// Whether the independence-in-time reduction applies.
pub fn uses_fast_path(params: &AssociationParams, ids: &[ParamId]) -> bool {
    params.lapse.is_independence()
        && params.streams.iter().all(|s| s.is_independence())
        && !ids.iter().any(|id| matches!(id, ParamId::Psi(_)))
}

fn score_of(u: f64) -> f64 {
    normal_score(u.clamp(U_CLAMP, 1.0 - U_CLAMP))
}

/// Lapse limits for the event `T = t`. Periods before `t` stay below
/// `F_L(0)`; for `t <= m` the lapse at `t` is an upper orthant, written as a
/// negated coordinate so the event is a single normal probability.
fn lapse_event(fl0: &[f64], t: usize, m: usize) -> (Vec<f64>, Option<usize>) {
    let z = (0..m)
        .map(|tau| match (tau + 1).cmp(&t) {
            std::cmp::Ordering::Less => normal_score(fl0[tau]),
            std::cmp::Ordering::Equal => -normal_score(fl0[tau]),
            std::cmp::Ordering::Greater => f64::INFINITY,
        })
        .collect();
    (z, (t <= m).then(|| t - 1))
}

/// `D R D` with `D` the identity except `-1` at `flip`. Also maps gradients
/// in the flipped matrix back to the original entries.
fn flip_corr(r: &DMatrix<f64>, flip: Option<usize>) -> DMatrix<f64> {
    let mut out = r.clone();
    if let Some(f) = flip {
        for a in (0..r.nrows()).filter(|&a| a != f) {
            out[(a, f)] = -out[(a, f)];
            out[(f, a)] = -out[(f, a)];
        }
    }
    out
}

/// Hybrid numerator of a cell: differences over the atoms of discrete
/// outcomes and partial derivatives in continuous ones. Returns the value and
/// the gradient in the entries of `r`.
fn hybrid_terms(
    zl: &[f64],
    flip: Option<usize>,
    tj: &Triplet,
    tk: &Triplet,
    r: &DMatrix<f64>,
    with_grad: bool,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let nl = zl.len();
    let (pj, pk) = (nl, nl + 1);
    let rf = flip_corr(r, flip);
    let corners = |t: &Triplet| -> Vec<(f64, f64)> {
        if t.is_discrete() {
            vec![(1.0, normal_score(t.cdf)), (-1.0, normal_score(t.cdf_left))]
        } else {
            vec![(1.0, score_of(t.cdf))]
        }
    };
    let partial = match (tj.is_discrete(), tk.is_discrete()) {
        (true, true) => Partial::None,
        (false, true) => Partial::One(pj),
        (true, false) => Partial::One(pk),
        (false, false) => Partial::Two(pj, pk),
    };
    let mut dens = 1.0;
    for t in [tj, tk] {
        if !t.is_discrete() {
            dens *= t.density;
        }
    }
    let mut value = 0.0;
    let mut grad = with_grad.then(|| DMatrix::zeros(nl + 2, nl + 2));
    let mut z = zl.to_vec();
    z.extend([0.0, 0.0]);
    for &(sj, zj) in &corners(tj) {
        for &(sk, zk) in &corners(tk) {
            if zj == f64::NEG_INFINITY || zk == f64::NEG_INFINITY {
                continue;
            }
            z[pj] = zj;
            z[pk] = zk;
            let term = copula_term(&z, &rf, partial, with_grad)?;
            value += sj * sk * term.value;
            if let (Some(g), Some(tg)) = (grad.as_mut(), term.grad) {
                *g += tg * (sj * sk);
            }
        }
    }
    Ok((value * dens, grad.map(|g| flip_corr(&g, flip) * dens)))
}

fn grad_dot(g: &DMatrix<f64>, dr: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for a in 0..g.nrows() {
        for b in a + 1..g.ncols() {
            s += g[(a, b)] * dr[(a, b)];
        }
    }
    s
}

/// Which formula evaluates a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPath {
    /// Three-dimensional reduction whenever it applies.
    Auto,
    /// Always the full `(m+2)`-dimensional terms.
    General,
}

/// Conditional density of `(Y_js, Y_ks)` given `T = t` and its score in
/// `ids`.
pub fn cell_eval(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    params: &AssociationParams,
    ids: &[ParamId],
    with_grad: bool,
) -> Result<CellEval> {
    cell_eval_path(tj, tk, cell, fl0, params, ids, with_grad, EvalPath::Auto)
}

#[allow(clippy::too_many_arguments)]
pub fn cell_eval_path(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    params: &AssociationParams,
    ids: &[ParamId],
    with_grad: bool,
    path: EvalPath,
) -> Result<CellEval> {
    let m = params.m();
    cell.validate(m)?;
    check_fl0(fl0, cell.t.min(m))?;
    let zero_score = || vec![0.0; ids.len()];
    if [tj, tk].iter().any(|t| t.is_discrete() && t.cdf - t.cdf_left < MIN_ATOM) {
        return Ok(CellEval { density: DENSITY_FLOOR, score: zero_score(), floored: true });
    }
    let (joint, jgrad, prob, pgrad, drs) = if path == EvalPath::Auto && uses_fast_path(params, ids) {
        fast_parts(tj, tk, cell, fl0, params, ids, with_grad)?
    } else {
        general_parts(tj, tk, cell, fl0, params, ids, with_grad)?
    };
    if prob < DENSITY_FLOOR {
        return Err(Error::Numerical(format!("Pr(T = {}) = {prob:e} is too small", cell.t)));
    }
    if joint < -1e-12 {
        return Err(Error::Numerical(format!("negative joint mass {joint:e}")));
    }
    let density = joint / prob;
    if joint < DENSITY_FLOOR || !density.is_finite() {
        return Ok(CellEval { density: DENSITY_FLOOR, score: zero_score(), floored: true });
    }
    let score = match (jgrad, with_grad) {
        (Some(jg), true) => drs
            .iter()
            .map(|dr| {
                let dj = grad_dot(&jg, dr) / joint;
                let dp = pgrad.as_ref().map_or(0.0, |pg| grad_dot(pg, dr) / prob);
                dj - dp
            })
            .collect(),
        _ => zero_score(),
    };
    Ok(CellEval { density, score, floored: false })
}

type Parts = (f64, Option<DMatrix<f64>>, f64, Option<DMatrix<f64>>, Vec<DMatrix<f64>>);

fn fast_parts(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    params: &AssociationParams,
    ids: &[ParamId],
    with_grad: bool,
) -> Result<Parts> {
    let (j, k) = (cell.j, cell.k);
    let rho_jk = params.get(ParamId::RhoCross(j.min(k), j.max(k)));
    let r = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0, params.rho_l[j], params.rho_l[k],
            params.rho_l[j], 1.0, rho_jk,
            params.rho_l[k], rho_jk, 1.0,
        ],
    );
    let f = fl0[cell.s - 1];
    // conditional lapse law at period s: below F_L(0) before t, above at t
    let (zl, flip, prob) = if cell.s < cell.t {
        (normal_score(f), None, f)
    } else {
        (-normal_score(f), Some(0), 1.0 - f)
    };
    let (joint, jgrad) = hybrid_terms(&[zl], flip, tj, tk, &r, with_grad)?;
    let drs = ids
        .iter()
        .map(|id| {
            let mut d = DMatrix::zeros(3, 3);
            let pos = match *id {
                ParamId::RhoL(q) if q == j => Some((0, 1)),
                ParamId::RhoL(q) if q == k => Some((0, 2)),
                ParamId::RhoCross(a, b) if (a, b) == (j.min(k), j.max(k)) => Some((1, 2)),
                _ => None,
            };
            if let Some((a, b)) = pos {
                d[(a, b)] = 1.0;
                d[(b, a)] = 1.0;
            }
            d
        })
        .collect();
    Ok((joint, jgrad, prob, None, drs))
}

fn general_parts(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    params: &AssociationParams,
    ids: &[ParamId],
    with_grad: bool,
) -> Result<Parts> {
    let m = params.m();
    let sigma = params.sigma_pair(cell.j, cell.k, cell.s)?;
    let r = sigma.correlation().into_matrix();
    let (zl, flip) = lapse_event(fl0, cell.t, m);
    let (joint, jgrad) = hybrid_terms(&zl, flip, tj, tk, &r, with_grad)?;
    let mut z = zl;
    z.extend([f64::INFINITY, f64::INFINITY]);
    let term = copula_term(&z, &flip_corr(&r, flip), Partial::None, with_grad)?;
    let prob = term.value;
    let pgrad = term.grad.map(|g| flip_corr(&g, flip));
    let drs = if with_grad {
        ids.iter()
            .map(|id| dcorrelation(sigma.as_matrix(), &params.dsigma_pair(cell.j, cell.k, cell.s, *id)))
            .collect()
    } else {
        Vec::new()
    };
    Ok((joint, jgrad, prob, pgrad, drs))
}

/// Conditional hybrid density of `(Y_js, Y_ks)` given `T = t`.
pub fn conditional_pair_density(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    params: &AssociationParams,
) -> Result<f64> {
    Ok(cell_eval(tj, tk, cell, fl0, params, &[], false)?.density)
}

/// Score of the conditional density in the parameters `ids`.
pub fn dropout_score(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    params: &AssociationParams,
    ids: &[ParamId],
) -> Result<Vec<f64>> {
    Ok(cell_eval(tj, tk, cell, fl0, params, ids, true)?.score)
}

/// Stacked dropout scores over cells `(pair, s, t)` with `s <= min(t, m)`.
pub struct DropoutMoments<'a> {
    obs: &'a [SubjectObs],
    base: AssociationParams,
    ids: Vec<ParamId>,
    cells: Vec<Cell>,
    /// Position of the first cell for each `(pair, t)`, indexed by `t`.
    cell_start: Vec<Vec<usize>>,
}

impl<'a> DropoutMoments<'a> {
    pub fn new(obs: &'a [SubjectObs], base: AssociationParams, ids: Vec<ParamId>) -> Result<Self> {
        base.validate()?;
        let m = base.m();
        let p = base.p();
        if p < 2 {
            return Err(Error::Data("at least two outcomes are required".into()));
        }
        for (i, o) in obs.iter().enumerate() {
            if o.t == 0 || o.t > m + 1 || o.trip.len() != o.t.min(m) || o.fl0.len() != o.t.min(m) {
                return Err(Error::Data(format!("subject {i} is inconsistent with m = {m}")));
            }
        }
        let mut cells = Vec::new();
        let mut cell_start = vec![vec![0; m + 2]; p * (p - 1) / 2];
        for t in 1..=m + 1 {
            for (pi, &(j, k)) in pairs(p).iter().enumerate() {
                cell_start[pi][t] = cells.len();
                for s in 1..=t.min(m) {
                    cells.push(Cell { j, k, s, t });
                }
            }
        }
        for t in 1..=m + 1 {
            if !obs.iter().any(|o| o.t == t) {
                info!("no subjects with lapse time {t}; its cells are skipped");
            }
        }
        Ok(DropoutMoments { obs, base, ids, cells, cell_start })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn params_at(&self, theta: &[f64]) -> AssociationParams {
        self.base.with_values(&self.ids, theta)
    }

    /// Number of floored cell densities at `theta`.
    pub fn floored_count(&self, theta: &[f64]) -> Result<usize> {
        let params = self.params_at(theta);
        let counts: Vec<usize> = self
            .obs
            .par_iter()
            .map(|o| -> Result<usize> {
                let mut c = 0;
                for (pi, &(j, k)) in pairs(params.p()).iter().enumerate() {
                    let _ = pi;
                    for s in 1..=o.t.min(params.m()) {
                        let cell = Cell { j, k, s, t: o.t };
                        let ev = cell_eval(&o.trip[s - 1][j], &o.trip[s - 1][k], cell, &o.fl0, &params, &[], false)?;
                        c += ev.floored as usize;
                    }
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        Ok(counts.iter().sum())
    }
}

impl MomentModel for DropoutMoments<'_> {
    fn n_params(&self) -> usize {
        self.ids.len()
    }

    fn n_moments(&self) -> usize {
        self.ids.len() * self.cells.len()
    }

    fn n_subjects(&self) -> usize {
        self.obs.len()
    }

    fn subject_moments(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let params = self.params_at(theta);
        let r = self.ids.len();
        let o = &self.obs[i];
        let mut g = vec![0.0; self.n_moments()];
        for (pi, &(j, k)) in pairs(params.p()).iter().enumerate() {
            for s in 1..=o.t.min(params.m()) {
                let cell = Cell { j, k, s, t: o.t };
                let ev = cell_eval(&o.trip[s - 1][j], &o.trip[s - 1][k], cell, &o.fl0, &params, &self.ids, true)?;
                let c = self.cell_start[pi][o.t] + s - 1;
                g[c * r..(c + 1) * r].copy_from_slice(&ev.score);
            }
        }
        Ok(g)
    }

    fn admissible(&self, theta: &[f64]) -> bool {
        theta.len() == self.ids.len()
            && theta.iter().all(|v| v.abs() < 1.0)
            && self.params_at(theta).validate().is_ok()
    }

    fn pl_map(&self) -> DMatrix<f64> {
        let r = self.ids.len();
        let mut b = DMatrix::zeros(r, self.n_moments());
        for c in 0..self.cells.len() {
            for a in 0..r {
                b[(a, c * r + a)] = 1.0;
            }
        }
        b
    }
}

/// Result of the dropout estimation pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct DropoutFit {
    pub params: Vec<String>,
    pub pairwise: PlResult,
    pub pairwise_std_errors: Vec<f64>,
    pub gmm: GmmResult,
    pub n_cells: usize,
    pub floored: usize,
}

/// Pairwise starting values from the summed dropout scores, then GMM over
/// all stacked cells with the plug-in weight at the pairwise estimate.
pub fn fit_dropout_gmm(
    obs: &[SubjectObs],
    init: &AssociationParams,
    ids: &[ParamId],
    mode: WeightMode,
) -> Result<DropoutFit> {
    let inner = DropoutMoments::new(obs, init.clone(), ids.to_vec())?;
    let model = gmm::Memo::new(&inner);
    let start = init.values(ids);
    let pl = gmm::solve_pl(&model, &start)?;
    let pl_cov = gmm::pl_covariance(&model, &pl.theta)?;
    let fit = gmm::fit_gmm(&model, &pl.theta, mode)?;
    let floored = inner.floored_count(&fit.theta)?;
    Ok(DropoutFit {
        params: ids.iter().map(|id| id.to_string()).collect(),
        pairwise_std_errors: (0..ids.len()).map(|a| pl_cov[(a, a)].max(0.0).sqrt()).collect(),
        pairwise: pl,
        gmm: fit,
        n_cells: inner.cells.len(),
        floored,
    })
}
