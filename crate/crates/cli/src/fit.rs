//! Two-stage fit of a panel file: marginal regressions, then the
//! association parameters by pairwise likelihood and GMM.

use lapsecop_core::dropout::{fit_dropout_gmm, SubjectObs};
use lapsecop_core::gmm::WeightMode;
use lapsecop_core::marginal::{fit_logistic, fit_tweedie, MarginalModel};
use lapsecop_core::panel::PanelDataset;
use lapsecop_core::simulation::Dynamics;
use lapsecop_core::temporal::{AssociationParams, TemporalKind, TemporalSpec};
use lapsecop_core::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn default_power() -> f64 {
    1.67
}

fn default_weight() -> WeightMode {
    WeightMode::OneStep
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Horizon; defaults to the longest subject record.
    #[serde(default)]
    pub m: Option<usize>,
    /// Defaults to every covariate column of the data.
    #[serde(default)]
    pub lapse_covariates: Option<Vec<String>>,
    #[serde(default)]
    pub outcome_covariates: Option<Vec<String>>,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub lapse_dynamics: Dynamics,
    #[serde(default)]
    pub outcome_dynamics: Dynamics,
    #[serde(default)]
    pub estimate_psi: bool,
    #[serde(default = "default_weight")]
    pub weight: WeightMode,
}

impl FitConfig {
    fn has_temporal_params(&self) -> bool {
        self.estimate_psi
            || self.lapse_dynamics.kind != TemporalKind::Independence
            || self.outcome_dynamics.kind != TemporalKind::Independence
    }
}

#[derive(Debug, Serialize)]
pub struct DataSummary {
    pub subjects: usize,
    pub rows: usize,
    pub m: usize,
    pub outcomes: Vec<String>,
    pub covariates: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Marginals {
    pub lapse: MarginalModel,
    pub outcomes: Vec<MarginalModel>,
}

#[derive(Debug, Serialize)]
pub struct Association {
    pub params: Vec<String>,
    pub theta_pl: Vec<f64>,
    pub se_pl: Vec<f64>,
    pub pl_iterations: usize,
    pub pl_grad_norm: f64,
    pub theta_gmm: Vec<f64>,
    pub se_gmm: Vec<f64>,
    pub covariance_gmm: Vec<Vec<f64>>,
    pub j_stat: f64,
    pub df: usize,
    pub effective_df: usize,
    /// Chi-square tail probability of `j_stat` on `effective_df`.
    pub j_p_value: Option<f64>,
    pub gmm_iterations: usize,
    pub converged: bool,
    pub weight: WeightMode,
    pub ridge: Option<f64>,
    pub n_cells: usize,
    pub floored_cells: usize,
}

#[derive(Debug, Serialize)]
pub struct FitOutput {
    pub data: DataSummary,
    pub marginals: Marginals,
    pub association: Association,
    pub warnings: Vec<String>,
}

fn resolve(names: &Option<Vec<String>>, data: &PanelDataset) -> Vec<String> {
    names.clone().unwrap_or_else(|| data.covariate_names.clone())
}

pub fn run_fit(data: &PanelDataset, config: &FitConfig) -> Result<FitOutput> {
    if data.m == 1 && config.has_temporal_params() {
        return Err(Error::Data(
            "single-period data (m = 1) cannot identify temporal parameters; \
             use independence dynamics and estimate_psi = false"
                .into(),
        ));
    }
    let mut warnings = Vec::new();
    let lapse = fit_logistic(data, &resolve(&config.lapse_covariates, data))?;
    let outcome_cov = resolve(&config.outcome_covariates, data);
    let outcomes = (0..data.p())
        .map(|j| fit_tweedie(data, j, &outcome_cov, config.power))
        .collect::<Result<Vec<_>>>()?;
    for (name, model) in std::iter::once(("lapse", &lapse)).chain(data.outcome_names.iter().map(|n| n.as_str()).zip(&outcomes)) {
        if !model.converged {
            warnings.push(format!("marginal regression for {name} did not converge"));
        }
    }

    let p = data.p();
    let spec = |d: Dynamics| TemporalSpec::new(d.kind, d.psi, data.m);
    let init = AssociationParams::new(
        vec![0.0; p],
        vec![0.0; p * (p - 1) / 2],
        spec(config.lapse_dynamics)?,
        vec![spec(config.outcome_dynamics)?; p],
    )?;
    let ids = init.all_params(config.estimate_psi);
    let obs = SubjectObs::from_panel(data, &lapse, &outcomes)?;
    let fit = fit_dropout_gmm(&obs, &init, &ids, config.weight)?;
    if fit.floored > 0 {
        warnings.push(format!("{} cells hit the density floor at the estimate", fit.floored));
    }
    if data.n() < 250 {
        warnings.push(format!("n = {} is below 250; the GMM lapse estimators may be unreliable", data.n()));
    }
    let g = fit.gmm;
    let j_p_value = (g.effective_df > 0)
        .then(|| ChiSquared::new(g.effective_df as f64).ok().map(|c| c.sf(g.j_stat)))
        .flatten();
    Ok(FitOutput {
        data: DataSummary {
            subjects: data.n(),
            rows: data.n_rows(),
            m: data.m,
            outcomes: data.outcome_names.clone(),
            covariates: data.covariate_names.clone(),
        },
        marginals: Marginals { lapse, outcomes },
        association: Association {
            params: fit.params,
            theta_pl: fit.pairwise.theta,
            se_pl: fit.pairwise_std_errors,
            pl_iterations: fit.pairwise.iterations,
            pl_grad_norm: fit.pairwise.grad_norm,
            theta_gmm: g.theta,
            se_gmm: g.std_errors,
            covariance_gmm: g.covariance,
            j_stat: g.j_stat,
            df: g.df,
            effective_df: g.effective_df,
            j_p_value,
            gmm_iterations: g.iterations,
            converged: g.converged,
            weight: config.weight,
            ridge: g.ridge,
            n_cells: fit.n_cells,
            floored_cells: fit.floored,
        },
        warnings,
    })
}
