//! Synthetic panels and the replicated lapse study.
//!
//! Covariates: `x1 ~ Bernoulli(0.5)`, `x2, x3, x4 ~ N(0, 1)` fixed per
//! subject, `x5 = t`. Default coefficients put the mean per-period lapse
//! probability near 0.25 and the share of zero claims near 0.85 at
//! `phi = 42`.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copula::{std_normal_cdf, CorrMatrix, U_CLAMP};
use crate::dropout::{fit_dropout_gmm, SubjectObs};
use crate::gmm::WeightMode;
use crate::marginal::{fit_logistic, fit_tweedie, Family, MarginalModel};
use crate::panel::{PanelDataset, Subject};
use crate::temporal::{AssociationParams, ParamId, TemporalKind, TemporalSpec};
use crate::{Error, Result};

pub const COVARIATES: [&str; 5] = ["x1", "x2", "x3", "x4", "x5"];

/// Temporal law of one stream in a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dynamics {
    pub kind: TemporalKind,
    #[serde(default)]
    pub psi: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics { kind: TemporalKind::Independence, psi: 0.0 }
    }
}

fn default_m() -> usize {
    5
}
fn default_reps() -> usize {
    1
}
fn default_power() -> f64 {
    1.67
}
fn default_beta_l() -> Vec<f64> {
    vec![-0.88, 0.3, 0.2, -0.2, 0.1, -0.15]
}
fn default_beta_1() -> Vec<f64> {
    vec![2.4, 0.2, 0.1, -0.1, 0.1, 0.0]
}
fn default_beta_2() -> Vec<f64> {
    vec![2.3, -0.1, 0.1, 0.1, -0.1, 0.05]
}
fn default_seed() -> u64 {
    1
}

/// Study design. `n`, `phi1`, `phi2` and `rho = (rho_L1, rho_L2, rho_12)`
/// are required in JSON; the rest have defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub n: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub phi1: f64,
    pub phi2: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    pub rho: [f64; 3],
    /// Intercept first, then one coefficient per covariate.
    #[serde(default = "default_beta_l")]
    pub beta_l: Vec<f64>,
    #[serde(default = "default_beta_1")]
    pub beta_1: Vec<f64>,
    #[serde(default = "default_beta_2")]
    pub beta_2: Vec<f64>,
    #[serde(default)]
    pub lapse_dynamics: Dynamics,
    /// Shared by both outcome streams.
    #[serde(default)]
    pub outcome_dynamics: Dynamics,
    /// Estimate the temporal coefficients of non-independence streams.
    #[serde(default)]
    pub estimate_psi: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl StudyConfig {
    /// One cell of the lapse study: truth `(-0.2, 0.2, 0.1)`, equal
    /// dispersions, default coefficients.
    pub fn table1(n: usize, phi: f64, reps: usize, seed: u64) -> Self {
        StudyConfig {
            n,
            m: default_m(),
            reps,
            phi1: phi,
            phi2: phi,
            power: default_power(),
            rho: [-0.2, 0.2, 0.1],
            beta_l: default_beta_l(),
            beta_1: default_beta_1(),
            beta_2: default_beta_2(),
            lapse_dynamics: Dynamics::default(),
            outcome_dynamics: Dynamics::default(),
            estimate_psi: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::Data(format!("n = {} is below the minimum of 50", self.n)));
        }
        if self.reps < 1 {
            return Err(Error::Data("reps must be at least 1".into()));
        }
        if self.m < 1 {
            return Err(Error::Data("m must be at least 1".into()));
        }
        for (name, v) in [("phi1", self.phi1), ("phi2", self.phi2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Data(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.power > 1.0 && self.power < 2.0) {
            return Err(Error::Data(format!("power = {} outside (1, 2)", self.power)));
        }
        for (name, b) in [("beta_l", &self.beta_l), ("beta_1", &self.beta_1), ("beta_2", &self.beta_2)] {
            if b.len() != COVARIATES.len() + 1 {
                return Err(Error::Data(format!(
                    "{name} needs {} entries (intercept and {} covariates), got {}",
                    COVARIATES.len() + 1,
                    COVARIATES.len(),
                    b.len()
                )));
            }
        }
        self.association().map(|_| ())
    }

    /// True association parameters.
    pub fn association(&self) -> Result<AssociationParams> {
        let spec = |d: Dynamics| TemporalSpec::new(d.kind, d.psi, self.m);
        AssociationParams::new(
            vec![self.rho[0], self.rho[1]],
            vec![self.rho[2]],
            spec(self.lapse_dynamics)?,
            vec![spec(self.outcome_dynamics)?; 2],
        )
    }

    /// Parameters estimated in the study.
    pub fn estimated_params(&self) -> Result<Vec<ParamId>> {
        Ok(self.association()?.all_params(self.estimate_psi))
    }

    fn covariate_names() -> Vec<String> {
        COVARIATES.iter().map(|s| s.to_string()).collect()
    }

    /// True marginal models: lapse first, then the two outcomes.
    pub fn marginal_models(&self) -> Result<(MarginalModel, Vec<MarginalModel>)> {
        let names = Self::covariate_names();
        let lapse = MarginalModel::from_coefficients(
            Family::LogitBernoulli,
            &names,
            self.beta_l.clone(),
            1.0,
            0.0,
            &names,
        )?;
        let outcomes = [(&self.beta_1, self.phi1), (&self.beta_2, self.phi2)]
            .into_iter()
            .map(|(b, phi)| {
                MarginalModel::from_coefficients(Family::TweedieLogLink, &names, b.clone(), phi, self.power, &names)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((lapse, outcomes))
    }
}

/// Seed of replicate `rep`: the first word of stream `rep` of a ChaCha
/// generator keyed by the master seed.
pub fn replicate_seed(master: u64, rep: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep);
    rng.next_u64()
}

/// Lower factor `L` with `L L' = r`, by Cholesky or, for singular `r`, the
/// symmetric eigendecomposition.
pub fn correlation_factor(r: &CorrMatrix) -> DMatrix<f64> {
    let m = r.as_matrix().clone();
    if let Some(c) = m.clone().cholesky() {
        return c.l();
    }
    let eig = m.symmetric_eigen();
    let sq = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&sq)
}

fn normal_vector<R: Rng + ?Sized>(rng: &mut R, factor: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_iterator(factor.ncols(), (0..factor.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    factor * e
}

fn uniform_of(z: f64) -> f64 {
    std_normal_cdf(z).clamp(U_CLAMP, 1.0 - U_CLAMP)
}

/// Draw one panel. Rows after the first lapse are dropped; period 1 is
/// always kept.
pub fn generate_panel(config: &StudyConfig, seed: u64) -> Result<PanelDataset> {
    config.validate()?;
    let m = config.m;
    let factor = correlation_factor(&config.association()?.sigma_full()?.correlation());
    let (lapse, outcomes) = config.marginal_models()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let x1 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let fixed: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z = normal_vector(&mut rng, &factor);
        let mut s = Subject { id: i as u64 + 1, lapse: Vec::new(), y: Vec::new(), x: Vec::new() };
        for t in 0..m {
            let x = vec![x1, fixed[0], fixed[1], fixed[2], (t + 1) as f64];
            let lapsed = uniform_of(z[t]) > lapse.cdf_zero(&x)?;
            let y = outcomes
                .iter()
                .enumerate()
                .map(|(j, model)| model.tweedie(&x)?.quantile(uniform_of(z[(j + 1) * m + t])))
                .collect::<Result<Vec<_>>>()?;
            s.lapse.push(lapsed as u8);
            s.y.push(y);
            s.x.push(x);
            if lapsed {
                break;
            }
        }
        subjects.push(s);
    }
    Ok(PanelDataset {
        m,
        outcome_names: vec!["y1".into(), "y2".into()],
        covariate_names: StudyConfig::covariate_names(),
        subjects,
    })
}

/// Outcomes for given covariate rows from marginal models coupled by a
/// Gaussian copula with correlation `corr`.
pub fn draw_outcomes<R: Rng + ?Sized>(
    rng: &mut R,
    rows: &[Vec<f64>],
    models: &[MarginalModel],
    corr: &CorrMatrix,
) -> Result<Vec<Vec<f64>>> {
    if corr.dim() != models.len() {
        return Err(Error::domain(format!("{}-dim correlation for {} models", corr.dim(), models.len())));
    }
    let factor = correlation_factor(corr);
    rows.iter()
        .map(|x| {
            let z = normal_vector(rng, &factor);
            models
                .iter()
                .zip(z.iter())
                .map(|(model, &zj)| {
                    let u = uniform_of(zj);
                    match model.family {
                        Family::LogitBernoulli => Ok(if u > model.cdf_zero(x)? { 1.0 } else { 0.0 }),
                        Family::TweedieLogLink => model.tweedie(x)?.quantile(u),
                    }
                })
                .collect()
        })
        .collect()
}

/// Stage one and stage two on one panel; returns estimates and asymptotic
/// standard errors, or `None` when the GMM did not converge.
pub fn fit_replicate(config: &StudyConfig, data: &PanelDataset) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let names = StudyConfig::covariate_names();
    let lapse = fit_logistic(data, &names)?;
    let outcomes = (0..data.p()).map(|j| fit_tweedie(data, j, &names, config.power)).collect::<Result<Vec<_>>>()?;
    let obs = SubjectObs::from_panel(data, &lapse, &outcomes)?;
    let truth = config.association()?;
    let ids = config.estimated_params()?;
    let init = truth.with_values(&ids, &vec![0.0; ids.len()]);
    let fit = fit_dropout_gmm(&obs, &init, &ids, WeightMode::OneStep)?;
    Ok(fit.gmm.converged.then_some((fit.gmm.theta, fit.gmm.std_errors)))
}

/// Aggregated study output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub n: usize,
    pub m: usize,
    pub phi1: f64,
    pub phi2: f64,
    pub reps: usize,
    pub seed: u64,
    pub params: Vec<String>,
    pub truth: Vec<f64>,
    /// Mean estimate minus truth over converged replicates.
    pub bias: Vec<f64>,
    /// Replicate standard deviation; absent with fewer than two converged
    /// replicates.
    pub se: Option<Vec<f64>>,
    pub mean_asymptotic_se: Vec<f64>,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Per replicate estimates, `None` for failed replicates.
    pub estimates: Vec<Option<Vec<f64>>>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

/// Run every replicate (in parallel, each on its own generator stream) and
/// aggregate in replicate order.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let ids = config.estimated_params()?;
    let truth = config.association()?.values(&ids);
    let outcomes: Vec<Result<Option<(Vec<f64>, Vec<f64>)>>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let data = generate_panel(config, replicate_seed(config.seed, rep as u64))?;
            fit_replicate(config, &data)
        })
        .collect();

    let mut estimates = Vec::with_capacity(config.reps);
    let mut asym = Vec::new();
    let mut failures = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(Some((theta, se))) => {
                estimates.push(Some(theta));
                asym.push(se);
            }
            Ok(None) => {
                warn!("replicate {rep}: GMM did not converge");
                failures.push(format!("replicate {rep}: GMM did not converge"));
                estimates.push(None);
            }
            Err(e) => {
                warn!("replicate {rep}: {e}");
                failures.push(format!("replicate {rep}: {e}"));
                estimates.push(None);
            }
        }
    }
    let ok: Vec<&Vec<f64>> = estimates.iter().flatten().collect();
    // with no converged replicate the means below are NaN
    let k = ids.len();
    let count = ok.len() as f64;
    let mean: Vec<f64> = (0..k).map(|a| ok.iter().map(|t| t[a]).sum::<f64>() / count).collect();
    let se = (ok.len() > 1).then(|| {
        (0..k)
            .map(|a| (ok.iter().map(|t| (t[a] - mean[a]).powi(2)).sum::<f64>() / (count - 1.0)).sqrt())
            .collect()
    });
    let mean_asymptotic_se = (0..k).map(|a| asym.iter().map(|s| s[a]).sum::<f64>() / count).collect();

    let mut warnings = Vec::new();
    if ok.is_empty() {
        warnings.push(format!("none of {} replicates converged; bias and SE are undefined", config.reps));
    } else if !failures.is_empty() {
        warnings.push(format!("{} of {} replicates failed and are excluded", failures.len(), config.reps));
    }
    if config.reps < 10 {
        warnings.push(format!(
            "only {} replicate(s): bias and SE carry wide Monte Carlo uncertainty",
            config.reps
        ));
    }
    if config.n < 250 {
        warnings.push(format!(
            "n = {} is below 250; the GMM lapse estimators may be unreliable at sample sizes this small",
            config.n
        ));
    }
    Ok(StudyReport {
        n: config.n,
        m: config.m,
        phi1: config.phi1,
        phi2: config.phi2,
        reps: config.reps,
        seed: config.seed,
        params: ids.iter().map(|id| id.to_string()).collect(),
        bias: mean.iter().zip(&truth).map(|(m, t)| m - t).collect(),
        truth,
        se,
        mean_asymptotic_se,
        converged: ok.len(),
        convergence_rate: count / config.reps as f64,
        estimates,
        failures,
        warnings,
    })
}

impl StudyReport {
    /// Plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "n = {}, m = {}, phi = ({}, {}), reps = {}, seed = {}\n",
            self.n, self.m, self.phi1, self.phi2, self.reps, self.seed
        );
        out.push_str(&format!("{:<10}{:>10}{:>10}{:>10}{:>12}\n", "param", "truth", "bias", "se", "mean asy se"));
        for (a, name) in self.params.iter().enumerate() {
            let se = self.se.as_ref().map_or("-".to_string(), |s| format!("{:.4}", s[a]));
            out.push_str(&format!(
                "{:<10}{:>10.3}{:>10.4}{:>10}{:>12.4}\n",
                name, self.truth[a], self.bias[a], se, self.mean_asymptotic_se[a]
            ));
        }
        out.push_str(&format!(
            "converged {}/{} ({:.1}%)\n",
            self.converged,
            self.reps,
            100.0 * self.convergence_rate
        ));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    /// One CSV row per parameter.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["param", "truth", "bias", "se", "mean_asymptotic_se", "converged", "reps"])?;
        for (a, name) in self.params.iter().enumerate() {
            let se = self.se.as_ref().map_or(String::new(), |s| s[a].to_string());
            wr.write_record([
                name.clone(),
                self.truth[a].to_string(),
                self.bias[a].to_string(),
                se,
                self.mean_asymptotic_se[a].to_string(),
                self.converged.to_string(),
                self.reps.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}
