//! Temporal loading matrices and block association matrices.
//!
//! Streams are ordered lapse first, then the `p` outcomes. The full matrix has
//! blocks `rho_ab * Psi_a * Psi_b^T` with `rho_aa = 1`, each block `m x m`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::copula::{min_eigenvalue, AssocMatrix, PSD_TOL};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    Independence,
    Ar1,
    Ma1,
}

/// Temporal structure of one stream over a horizon of `m` periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalSpec {
    pub kind: TemporalKind,
    #[serde(default)]
    pub psi: f64,
    pub m: usize,
}

impl TemporalSpec {
    pub fn new(kind: TemporalKind, psi: f64, m: usize) -> Result<Self> {
        let spec = TemporalSpec { kind, psi, m };
        spec.validate()?;
        Ok(spec)
    }

    pub fn independence(m: usize) -> Self {
        TemporalSpec { kind: TemporalKind::Independence, psi: 0.0, m }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::domain("horizon m must be at least 1"));
        }
        if !self.psi.is_finite() {
            return Err(Error::domain("temporal coefficient is not finite"));
        }
        match self.kind {
            TemporalKind::Ar1 if self.psi.abs() >= 1.0 => {
                Err(Error::domain(format!("AR1 coefficient {} must satisfy |psi| < 1", self.psi)))
            }
            _ => Ok(()),
        }
    }

    pub fn is_independence(&self) -> bool {
        self.kind == TemporalKind::Independence || self.psi == 0.0
    }

    /// Lower-triangular loading matrix `Psi`.
    pub fn psi_matrix(&self) -> DMatrix<f64> {
        let m = self.m;
        DMatrix::from_fn(m, m, |t, s| match self.kind {
            _ if t == s => 1.0,
            TemporalKind::Independence => 0.0,
            TemporalKind::Ar1 if s < t => self.psi.powi((t - s) as i32),
            TemporalKind::Ma1 if s + 1 == t => self.psi,
            _ => 0.0,
        })
    }

    /// `d Psi / d psi`.
    pub fn dpsi_matrix(&self) -> DMatrix<f64> {
        let m = self.m;
        DMatrix::from_fn(m, m, |t, s| match self.kind {
            TemporalKind::Ar1 if s < t => {
                let k = (t - s) as i32;
                k as f64 * self.psi.powi(k - 1)
            }
            TemporalKind::Ma1 if s + 1 == t => 1.0,
            _ => 0.0,
        })
    }
}

/// Validated loading matrix for `spec`.
pub fn build_psi(spec: &TemporalSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    Ok(spec.psi_matrix())
}

/// One free association parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    /// Lapse correlation with outcome `j` (0-based).
    RhoL(usize),
    /// Correlation of outcomes `j < k`.
    RhoCross(usize, usize),
    /// Temporal coefficient of stream `a` (0 = lapse, `j + 1` = outcome `j`).
    Psi(usize),
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::RhoL(j) => write!(f, "rho_L{}", j + 1),
            ParamId::RhoCross(j, k) => write!(f, "rho_{}{}", j + 1, k + 1),
            ParamId::Psi(0) => write!(f, "psi_L"),
            ParamId::Psi(a) => write!(f, "psi_{a}"),
        }
    }
}

/// Association parameters: lapse-outcome correlations, outcome-outcome
/// correlations (pairs `j < k` in lexicographic order) and temporal specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    pub rho_l: Vec<f64>,
    pub rho_cross: Vec<f64>,
    pub lapse: TemporalSpec,
    pub streams: Vec<TemporalSpec>,
}

/// Index of pair `(j, k)`, `j < k < p`, in lexicographic order.
pub fn pair_index(j: usize, k: usize, p: usize) -> usize {
    debug_assert!(j < k && k < p);
    j * p - j * (j + 1) / 2 + (k - j - 1)
}

/// All pairs `j < k < p` in lexicographic order.
pub fn pairs(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).collect()
}

impl AssociationParams {
    pub fn new(
        rho_l: Vec<f64>,
        rho_cross: Vec<f64>,
        lapse: TemporalSpec,
        streams: Vec<TemporalSpec>,
    ) -> Result<Self> {
        let a = AssociationParams { rho_l, rho_cross, lapse, streams };
        a.validate()?;
        Ok(a)
    }

    /// All streams independent over time with horizon `m`.
    pub fn independent_time(rho_l: Vec<f64>, rho_cross: Vec<f64>, m: usize) -> Result<Self> {
        let p = rho_l.len();
        Self::new(rho_l, rho_cross, TemporalSpec::independence(m), vec![TemporalSpec::independence(m); p])
    }

    pub fn p(&self) -> usize {
        self.rho_l.len()
    }

    pub fn m(&self) -> usize {
        self.lapse.m
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::domain("at least one outcome stream is required"));
        }
        if self.rho_cross.len() != p * (p - 1) / 2 {
            return Err(Error::domain(format!(
                "{} cross correlations given for {p} outcomes",
                self.rho_cross.len()
            )));
        }
        if self.streams.len() != p {
            return Err(Error::domain(format!("{} temporal specs for {p} outcomes", self.streams.len())));
        }
        self.lapse.validate()?;
        for s in &self.streams {
            s.validate()?;
            if s.m != self.lapse.m {
                return Err(Error::domain("all streams must share the horizon m"));
            }
        }
        for id in self.all_params(false) {
            let v = self.get(id);
            if !(v.abs() < 1.0) {
                return Err(Error::domain(format!("{id} = {v} must lie in (-1, 1)")));
            }
        }
        let rho = self.stream_corr();
        if min_eigenvalue(&rho) < -PSD_TOL {
            let names: Vec<String> =
                self.all_params(false).iter().map(|id| format!("{id}={}", self.get(*id))).collect();
            return Err(Error::NotPsd(format!(
                "cross-stream correlations ({}) are not jointly admissible",
                names.join(", ")
            )));
        }
        Ok(())
    }

    /// `(p+1) x (p+1)` correlation between streams, lapse first.
    pub fn stream_corr(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_fn(p + 1, p + 1, |a, b| self.rho_between(a, b))
    }

    fn rho_between(&self, a: usize, b: usize) -> f64 {
        let p = self.p();
        match (a.min(b), a.max(b)) {
            (x, y) if x == y => 1.0,
            (0, y) => self.rho_l[y - 1],
            (x, y) => self.rho_cross[pair_index(x - 1, y - 1, p)],
        }
    }

    fn spec(&self, a: usize) -> &TemporalSpec {
        if a == 0 {
            &self.lapse
        } else {
            &self.streams[a - 1]
        }
    }

    /// Parameters in canonical order: `rho_L`, cross pairs, then (optionally)
    /// temporal coefficients of non-independence streams.
    pub fn all_params(&self, include_psi: bool) -> Vec<ParamId> {
        let p = self.p();
        let mut ids: Vec<ParamId> = (0..p).map(ParamId::RhoL).collect();
        ids.extend(pairs(p).into_iter().map(|(j, k)| ParamId::RhoCross(j, k)));
        if include_psi {
            ids.extend((0..=p).filter(|&a| self.spec(a).kind != TemporalKind::Independence).map(ParamId::Psi));
        }
        ids
    }

    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::RhoL(j) => self.rho_l[j],
            ParamId::RhoCross(j, k) => self.rho_cross[pair_index(j, k, self.p())],
            ParamId::Psi(a) => self.spec(a).psi,
        }
    }

    /// Copy with parameter `id` replaced; not validated.
    pub fn with(&self, id: ParamId, v: f64) -> Self {
        let mut out = self.clone();
        let p = self.p();
        match id {
            ParamId::RhoL(j) => out.rho_l[j] = v,
            ParamId::RhoCross(j, k) => out.rho_cross[pair_index(j, k, p)] = v,
            ParamId::Psi(0) => out.lapse.psi = v,
            ParamId::Psi(a) => out.streams[a - 1].psi = v,
        }
        out
    }

    pub fn values(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().map(|id| self.get(*id)).collect()
    }

    pub fn with_values(&self, ids: &[ParamId], v: &[f64]) -> Self {
        ids.iter().zip(v).fold(self.clone(), |acc, (id, x)| acc.with(*id, *x))
    }

    /// The full `m(p+1)`-dimensional association matrix.
    pub fn sigma_full(&self) -> Result<AssocMatrix> {
        self.validate()?;
        AssocMatrix::new(self.sigma_full_raw(None))
    }

    /// Full matrix, or its derivative in `param` when given.
    fn sigma_full_raw(&self, param: Option<ParamId>) -> DMatrix<f64> {
        let p = self.p();
        let m = self.m();
        let psis: Vec<DMatrix<f64>> = (0..=p).map(|a| self.spec(a).psi_matrix()).collect();
        let mut out = DMatrix::zeros(m * (p + 1), m * (p + 1));
        for a in 0..=p {
            for b in a..=p {
                let block = self.block(a, b, &psis, param, |x| x.clone_owned());
                out.view_mut((a * m, b * m), (m, m)).copy_from(&block);
                if a != b {
                    out.view_mut((b * m, a * m), (m, m)).copy_from(&block.transpose());
                }
            }
        }
        out.fill_lower_triangle_with_upper_triangle();
        out
    }

    // Block (a, b) built from row-selected loadings; `rows` picks the rows of
    // each Psi that enter (all rows for the full matrix).
    fn block<F>(
        &self,
        a: usize,
        b: usize,
        psis: &[DMatrix<f64>],
        param: Option<ParamId>,
        rows: F,
    ) -> DMatrix<f64>
    where
        F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    {
        let pa = rows(&psis[a]);
        let pb = rows(&psis[b]);
        let rho = self.rho_between(a, b);
        match param {
            None => rho * &pa * pb.transpose(),
            Some(ParamId::Psi(c)) => {
                let mut d = DMatrix::zeros(pa.nrows(), pb.nrows());
                if c == a {
                    d += rho * rows(&self.spec(a).dpsi_matrix()) * pb.transpose();
                }
                if c == b {
                    d += rho * &pa * rows(&self.spec(b).dpsi_matrix()).transpose();
                }
                d
            }
            Some(id) => {
                if a != b && self.stream_param(a, b) == Some(id) {
                    &pa * pb.transpose()
                } else {
                    DMatrix::zeros(pa.nrows(), pb.nrows())
                }
            }
        }
    }

    fn stream_param(&self, a: usize, b: usize) -> Option<ParamId> {
        let (x, y) = (a.min(b), a.max(b));
        match (x, y) {
            _ if x == y => None,
            (0, y) => Some(ParamId::RhoL(y - 1)),
            (x, y) => Some(ParamId::RhoCross(x - 1, y - 1)),
        }
    }

    /// `d Sigma_full / d theta` for one parameter.
    pub fn dsigma_full(&self, id: ParamId) -> DMatrix<f64> {
        self.sigma_full_raw(Some(id))
    }

    /// The `(m+2)`-dimensional matrix of `(L_1..L_m, Y_{j,s}, Y_{k,s})`,
    /// with `s` 1-based and outcomes `j != k` 0-based.
    pub fn sigma_pair(&self, j: usize, k: usize, s: usize) -> Result<AssocMatrix> {
        self.validate()?;
        self.check_pair(j, k, s)?;
        AssocMatrix::new(self.sigma_pair_raw(j, k, s, None))
    }

    pub fn dsigma_pair(&self, j: usize, k: usize, s: usize, id: ParamId) -> DMatrix<f64> {
        self.sigma_pair_raw(j, k, s, Some(id))
    }

    fn check_pair(&self, j: usize, k: usize, s: usize) -> Result<()> {
        let p = self.p();
        if j == k || j >= p || k >= p {
            return Err(Error::domain(format!("invalid outcome pair ({j}, {k}) for p = {p}")));
        }
        if s == 0 || s > self.m() {
            return Err(Error::domain(format!("period {s} outside 1..={}", self.m())));
        }
        Ok(())
    }

    fn sigma_pair_raw(&self, j: usize, k: usize, s: usize, param: Option<ParamId>) -> DMatrix<f64> {
        let p = self.p();
        let m = self.m();
        let psis: Vec<DMatrix<f64>> = (0..=p).map(|a| self.spec(a).psi_matrix()).collect();
        let all = |x: &DMatrix<f64>| x.clone_owned();
        let row = |x: &DMatrix<f64>| x.rows(s - 1, 1).clone_owned();
        let (a, b) = (j + 1, k + 1);
        let mut out = DMatrix::zeros(m + 2, m + 2);
        out.view_mut((0, 0), (m, m)).copy_from(&self.block(0, 0, &psis, param, all));
        for (pos, c) in [(m, a), (m + 1, b)] {
            // lapse rows against the s-th loading row of stream c
            let pc = row(&psis[c]);
            let rho = self.rho_between(0, c);
            let col = match param {
                None => rho * &psis[0] * pc.transpose(),
                Some(ParamId::Psi(q)) => {
                    let mut d = DMatrix::zeros(m, 1);
                    if q == 0 {
                        d += rho * self.lapse.dpsi_matrix() * pc.transpose();
                    }
                    if q == c {
                        d += rho * &psis[0] * row(&self.spec(c).dpsi_matrix()).transpose();
                    }
                    d
                }
                Some(id) if self.stream_param(0, c) == Some(id) => &psis[0] * pc.transpose(),
                Some(_) => DMatrix::zeros(m, 1),
            };
            out.view_mut((0, pos), (m, 1)).copy_from(&col);
            out.view_mut((pos, 0), (1, m)).copy_from(&col.transpose());
        }
        for (pi, ci) in [(m, a), (m + 1, b)] {
            for (pj, cj) in [(m, a), (m + 1, b)] {
                out[(pi, pj)] = self.block(ci, cj, &psis, param, row)[(0, 0)];
            }
        }
        out.fill_lower_triangle_with_upper_triangle();
        out
    }
}

/// Derivative of `R(Sigma)` given `d Sigma`.
pub fn dcorrelation(sigma: &DMatrix<f64>, dsigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = sigma.nrows();
    DMatrix::from_fn(d, d, |a, b| {
        if a == b {
            return 0.0;
        }
        let (saa, sbb) = (sigma[(a, a)], sigma[(b, b)]);
        let r = sigma[(a, b)] / (saa * sbb).sqrt();
        dsigma[(a, b)] / (saa * sbb).sqrt() - 0.5 * r * (dsigma[(a, a)] / saa + dsigma[(b, b)] / sbb)
    })
}
