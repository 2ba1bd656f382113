//! Cross-sectional Gaussian copula association estimation: hybrid pair
//! densities, pair scores, the pairwise likelihood estimator and GMM.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::copula::{
    bvn_cdf, bvn_pdf, density2_scores, dlog_density2, drho_h_scores, h_scores, min_eigenvalue,
    normal_score, PSD_TOL,
};
use crate::distributions::Triplet;
use crate::gmm::{self, GmmResult, MomentModel, PlResult, WeightMode};
use crate::marginal::MarginalModel;
use crate::temporal::pairs;
use crate::{Error, Result};

/// Densities below this are floored when taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;
/// Atoms narrower than this are treated as degenerate.
pub const MIN_ATOM: f64 = 1e-14;

/// Log pair density and its derivative in the pair correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEval {
    pub density: f64,
    pub score: f64,
    /// The density was floored; `score` is then zero.
    pub floored: bool,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("pair correlation {rho} must lie in (-1, 1)")))
    }
}

fn scores_of(t: &Triplet) -> (f64, f64) {
    (normal_score(t.cdf), normal_score(t.cdf_left))
}

/// Hybrid density of one pair of observations.
pub fn pair_density(tj: &Triplet, tk: &Triplet, rho: f64) -> Result<f64> {
    Ok(pair_eval(tj, tk, rho)?.density)
}

/// `d/drho log f_jk`.
pub fn pair_score(tj: &Triplet, tk: &Triplet, rho: f64) -> Result<f64> {
    Ok(pair_eval(tj, tk, rho)?.score)
}

pub fn pair_eval(tj: &Triplet, tk: &Triplet, rho: f64) -> Result<PairEval> {
    check_rho(rho)?;
    let (dj, dk) = (tj.is_discrete(), tk.is_discrete());
    let (value, deriv) = match (dj, dk) {
        (true, true) => {
            let (a1, a0) = scores_of(tj);
            let (b1, b0) = scores_of(tk);
            let p = bvn_cdf(a1, b1, rho) - bvn_cdf(a0, b1, rho) - bvn_cdf(a1, b0, rho)
                + bvn_cdf(a0, b0, rho);
            if p < -1e-12 {
                return Err(Error::Numerical(format!("negative rectangle probability {p:e}")));
            }
            let d = bvn_pdf(a1, b1, rho) - bvn_pdf(a0, b1, rho) - bvn_pdf(a1, b0, rho)
                + bvn_pdf(a0, b0, rho);
            (p.max(0.0), d)
        }
        (true, false) | (false, true) => {
            let (disc, cont) = if dj { (tj, tk) } else { (tk, tj) };
            let (a1, a0) = scores_of(disc);
            let zc = normal_score(cont.cdf);
            let h = |a: f64| if a == f64::NEG_INFINITY { 0.0 } else { h_scores(a, zc, rho) };
            let diff = h(a1) - h(a0);
            if diff < -1e-12 {
                return Err(Error::Numerical(format!("negative conditional mass {diff:e}")));
            }
            let dd = drho_h_scores(a1, zc, rho) - drho_h_scores(a0, zc, rho);
            (diff.max(0.0) * cont.density, dd * cont.density)
        }
        (false, false) => {
            let (zj, zk) = (normal_score(tj.cdf), normal_score(tk.cdf));
            let c = density2_scores(zj, zk, rho);
            let f = c * tj.density * tk.density;
            return Ok(if f < DENSITY_FLOOR || !f.is_finite() {
                PairEval { density: DENSITY_FLOOR, score: 0.0, floored: true }
            } else {
                PairEval { density: f, score: dlog_density2(zj, zk, rho), floored: false }
            });
        }
    };
    let degenerate = (dj && tj.cdf - tj.cdf_left < MIN_ATOM) || (dk && tk.cdf - tk.cdf_left < MIN_ATOM);
    if value < DENSITY_FLOOR || degenerate {
        return Ok(PairEval { density: value.max(DENSITY_FLOOR), score: 0.0, floored: true });
    }
    Ok(PairEval { density: value, score: deriv / value, floored: false })
}

/// How outcome pairs map to association parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStructure {
    /// One correlation per pair.
    Unstructured,
    /// A single correlation shared by all pairs.
    Exchangeable,
}

impl PairStructure {
    pub fn n_params(&self, p: usize) -> usize {
        match self {
            PairStructure::Unstructured => p * (p - 1) / 2,
            PairStructure::Exchangeable => 1,
        }
    }

    fn param_of_pair(&self, pair: usize) -> usize {
        match self {
            PairStructure::Unstructured => pair,
            PairStructure::Exchangeable => 0,
        }
    }
}

/// Marginal triplets of `n` subjects on `p` outcomes.
#[derive(Debug, Clone)]
pub struct CrossSection {
    pub obs: Vec<Vec<Triplet>>,
}

impl CrossSection {
    /// Evaluate fitted marginals at each subject's outcomes and covariates.
    pub fn from_models(y: &[Vec<f64>], rows: &[Vec<f64>], models: &[MarginalModel]) -> Result<Self> {
        if y.len() != rows.len() {
            return Err(Error::Data("outcome and covariate rows differ in number".into()));
        }
        let obs = y
            .iter()
            .zip(rows)
            .map(|(yi, xi)| {
                if yi.len() != models.len() {
                    return Err(Error::Data("one model per outcome is required".into()));
                }
                yi.iter().zip(models).map(|(v, m)| m.triplet(xi, *v)).collect()
            })
            .collect::<Result<_>>()?;
        Ok(CrossSection { obs })
    }

    pub fn n(&self) -> usize {
        self.obs.len()
    }

    pub fn p(&self) -> usize {
        self.obs.first().map_or(0, Vec::len)
    }
}

/// Stacked pair scores `g_i` of length `r * C(p, 2)`.
pub struct PairwiseMoments<'a> {
    data: &'a CrossSection,
    structure: PairStructure,
    pairs: Vec<(usize, usize)>,
}

impl<'a> PairwiseMoments<'a> {
    pub fn new(data: &'a CrossSection, structure: PairStructure) -> Result<Self> {
        let p = data.p();
        if p < 2 {
            return Err(Error::Data("at least two outcomes are required".into()));
        }
        if data.obs.iter().any(|o| o.len() != p) {
            return Err(Error::Data("ragged cross-section".into()));
        }
        Ok(PairwiseMoments { data, structure, pairs: pairs(p) })
    }

    /// Full correlation matrix implied by `theta`.
    pub fn corr(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = self.data.p();
        let mut m = DMatrix::identity(p, p);
        for (idx, &(j, k)) in self.pairs.iter().enumerate() {
            let v = theta[self.structure.param_of_pair(idx)];
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
        m
    }
}

impl MomentModel for PairwiseMoments<'_> {
    fn n_params(&self) -> usize {
        self.structure.n_params(self.data.p())
    }

    fn n_moments(&self) -> usize {
        self.n_params() * self.pairs.len()
    }

    fn n_subjects(&self) -> usize {
        self.data.n()
    }

    fn subject_moments(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let r = self.n_params();
        let obs = &self.data.obs[i];
        let mut g = vec![0.0; r * self.pairs.len()];
        for (idx, &(j, k)) in self.pairs.iter().enumerate() {
            let a = self.structure.param_of_pair(idx);
            g[idx * r + a] = pair_eval(&obs[j], &obs[k], theta[a])?.score;
        }
        Ok(g)
    }

    fn admissible(&self, theta: &[f64]) -> bool {
        theta.len() == self.n_params()
            && theta.iter().all(|t| t.abs() < 1.0)
            && min_eigenvalue(&self.corr(theta)) > PSD_TOL
    }

    fn pl_map(&self) -> DMatrix<f64> {
        let r = self.n_params();
        let mut b = DMatrix::zeros(r, self.n_moments());
        for idx in 0..self.pairs.len() {
            for a in 0..r {
                b[(a, idx * r + a)] = 1.0;
            }
        }
        b
    }

    fn structural_zeros(&self) -> Vec<bool> {
        let r = self.n_params();
        (0..self.n_moments())
            .map(|c| self.structure.param_of_pair(c / r) != c % r)
            .collect()
    }
}

/// Pairwise likelihood estimator from `init`.
pub fn fit_pairwise(data: &CrossSection, structure: PairStructure, init: &[f64]) -> Result<PlResult> {
    gmm::solve_pl(&PairwiseMoments::new(data, structure)?, init)
}

/// One-step GMM started (and weighted) at `theta_init`.
pub fn fit_gmm(data: &CrossSection, structure: PairStructure, theta_init: &[f64]) -> Result<GmmResult> {
    gmm::fit_gmm(&PairwiseMoments::new(data, structure)?, theta_init, WeightMode::OneStep)
}

/// Sandwich covariance of the pairwise estimator at `theta`.
pub fn pairwise_asymptotic_cov(
    data: &CrossSection,
    structure: PairStructure,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    gmm::pl_covariance(&PairwiseMoments::new(data, structure)?, theta)
}
