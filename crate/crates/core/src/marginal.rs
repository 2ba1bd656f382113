//! Stage-one marginal regressions fitted by iteratively reweighted least
//! squares: logistic regression for lapse and Tweedie log-link regression
//! for each claims stream.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{BernoulliParams, TweedieParams, Triplet};
use crate::panel::PanelDataset;
use crate::{Error, Result};

pub const MAX_IRLS_ITER: usize = 100;
pub const GRAD_TOL: f64 = 1e-8;
const MAX_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    LogitBernoulli,
    TweedieLogLink,
}

/// A fitted (or specified) marginal regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub family: Family,
    /// Covariate names; the first coefficient is the intercept.
    pub covariates: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Pearson dispersion (1 for the logistic model).
    pub phi: f64,
    /// Tweedie power (unused for the logistic model).
    pub power: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Positions of `covariates` among the dataset's covariate columns.
    #[serde(skip)]
    columns: Vec<usize>,
}

impl MarginalModel {
    /// Model with given coefficients, resolved against a dataset's columns.
    pub fn from_coefficients(
        family: Family,
        covariates: &[String],
        coefficients: Vec<f64>,
        phi: f64,
        power: f64,
        data_columns: &[String],
    ) -> Result<Self> {
        if coefficients.len() != covariates.len() + 1 {
            return Err(Error::domain("need one coefficient per covariate plus an intercept"));
        }
        let columns = resolve(covariates, data_columns)?;
        let k = coefficients.len();
        let model = MarginalModel {
            family,
            covariates: covariates.to_vec(),
            coefficients,
            std_errors: vec![f64::NAN; k],
            phi,
            power,
            iterations: 0,
            converged: true,
            columns,
        };
        if family == Family::TweedieLogLink {
            TweedieParams::new(1.0, phi, power)?;
        }
        Ok(model)
    }

    /// Re-resolve covariate columns, e.g. after deserialization.
    pub fn bind(&mut self, data_columns: &[String]) -> Result<()> {
        self.columns = resolve(&self.covariates, data_columns)?;
        Ok(())
    }

    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coefficients[0]
            + self.columns.iter().zip(&self.coefficients[1..]).map(|(&c, b)| row[c] * b).sum::<f64>()
    }

    /// Mean at a covariate row: `pi` for the logistic model, `mu` for Tweedie.
    pub fn mean(&self, row: &[f64]) -> f64 {
        let eta = self.linear_predictor(row);
        match self.family {
            Family::LogitBernoulli => logistic(eta),
            Family::TweedieLogLink => eta.exp(),
        }
    }

    pub fn tweedie(&self, row: &[f64]) -> Result<TweedieParams> {
        TweedieParams::new(self.mean(row), self.phi, self.power)
    }

    pub fn bernoulli(&self, row: &[f64]) -> Result<BernoulliParams> {
        BernoulliParams::new(self.mean(row))
    }

    /// `F(0)` at a covariate row: `1 - pi` or the Tweedie atom.
    pub fn cdf_zero(&self, row: &[f64]) -> Result<f64> {
        match self.family {
            Family::LogitBernoulli => Ok(self.bernoulli(row)?.cdf_zero()),
            Family::TweedieLogLink => Ok(self.tweedie(row)?.pzero()),
        }
    }

    /// `(F(y), F(y-), f(y))` for one observation.
    pub fn triplet(&self, row: &[f64], y: f64) -> Result<Triplet> {
        match self.family {
            Family::LogitBernoulli => {
                let b = self.bernoulli(row)?;
                match y {
                    v if v == 0.0 => Ok(b.triplet(0)),
                    v if v == 1.0 => Ok(b.triplet(1)),
                    _ => Err(Error::domain(format!("binary response {y}"))),
                }
            }
            Family::TweedieLogLink => self.tweedie(row)?.triplet(y),
        }
    }
}

/// `(F(y), F(y-), f(y))` of `model` at one covariate row.
pub fn marginal_cdf_triplet(model: &MarginalModel, row: &[f64], y: f64) -> Result<Triplet> {
    model.triplet(row, y)
}

fn resolve(covariates: &[String], data_columns: &[String]) -> Result<Vec<usize>> {
    covariates
        .iter()
        .map(|c| {
            data_columns
                .iter()
                .position(|d| d == c)
                .ok_or_else(|| Error::Data(format!("unknown covariate column '{c}'")))
        })
        .collect()
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn design(data: &PanelDataset, covariates: &[String]) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let columns = resolve(covariates, &data.covariate_names)?;
    let n = data.n_rows();
    let k = columns.len() + 1;
    let mut x = DMatrix::zeros(n, k);
    let mut r = 0;
    for s in &data.subjects {
        for row in &s.x {
            x[(r, 0)] = 1.0;
            for (c, &col) in columns.iter().enumerate() {
                x[(r, c + 1)] = row[col];
            }
            r += 1;
        }
    }
    Ok((x, columns))
}

/// Logistic regression of the lapse indicator on observed rows.
pub fn fit_logistic(data: &PanelDataset, covariates: &[String]) -> Result<MarginalModel> {
    let (x, columns) = design(data, covariates)?;
    let y: Vec<f64> =
        data.subjects.iter().flat_map(|s| s.lapse.iter().map(|&l| l as f64)).collect();
    let fit = irls(&x, &y, Family::LogitBernoulli, 0.0)?;
    Ok(fit.into_model(Family::LogitBernoulli, covariates, 0.0, columns))
}

/// Tweedie log-link regression of outcome `j` (0-based) with fixed power.
pub fn fit_tweedie(
    data: &PanelDataset,
    j: usize,
    covariates: &[String],
    power: f64,
) -> Result<MarginalModel> {
    if !(power > 1.0 && power < 2.0) {
        return Err(Error::domain(format!("tweedie power {power} outside (1, 2)")));
    }
    if j >= data.p() {
        return Err(Error::domain(format!("outcome {j} out of range")));
    }
    let (x, columns) = design(data, covariates)?;
    let y: Vec<f64> = data.subjects.iter().flat_map(|s| s.y.iter().map(|r| r[j])).collect();
    let fit = irls(&x, &y, Family::TweedieLogLink, power)?;
    Ok(fit.into_model(Family::TweedieLogLink, covariates, power, columns))
}

/// Raw IRLS output.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub phi: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl GlmFit {
    fn into_model(self, family: Family, covariates: &[String], power: f64, columns: Vec<usize>) -> MarginalModel {
        MarginalModel {
            family,
            covariates: covariates.to_vec(),
            coefficients: self.beta,
            std_errors: self.std_errors,
            phi: self.phi,
            power,
            iterations: self.iterations,
            converged: true,
            columns,
        }
    }
}

struct Eval {
    mu: DVector<f64>,
    deviance: f64,
}

fn evaluate(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, family: Family, power: f64) -> Eval {
    let eta = x * beta;
    let mu = eta.map(|e| match family {
        Family::LogitBernoulli => logistic(e),
        Family::TweedieLogLink => e.exp(),
    });
    let deviance = y
        .iter()
        .zip(mu.iter())
        .map(|(&yi, &m)| match family {
            Family::LogitBernoulli => {
                let p = if yi > 0.5 { m } else { 1.0 - m };
                -2.0 * p.max(1e-300).ln()
            }
            Family::TweedieLogLink => {
                let a = if yi > 0.0 { yi.powf(2.0 - power) / ((1.0 - power) * (2.0 - power)) } else { 0.0 };
                2.0 * (a - yi * m.powf(1.0 - power) / (1.0 - power) + m.powf(2.0 - power) / (2.0 - power))
            }
        })
        .sum();
    Eval { mu, deviance }
}

/// Working weights and score contributions `(w_i, s_i)` with
/// `score = X^T s` and expected information `X^T W X`.
fn working(y: &[f64], mu: &DVector<f64>, family: Family, power: f64) -> (Vec<f64>, Vec<f64>) {
    y.iter()
        .zip(mu.iter())
        .map(|(&yi, &m)| match family {
            Family::LogitBernoulli => (m * (1.0 - m), yi - m),
            Family::TweedieLogLink => (m.powf(2.0 - power), (yi - m) * m.powf(1.0 - power)),
        })
        .unzip()
}

fn info_and_score(x: &DMatrix<f64>, w: &[f64], s: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let k = x.ncols();
    let mut info = DMatrix::zeros(k, k);
    let mut score = DVector::zeros(k);
    for (i, row) in x.row_iter().enumerate() {
        for a in 0..k {
            score[a] += row[a] * s[i];
            for b in 0..=a {
                info[(a, b)] += row[a] * row[b] * w[i];
            }
        }
    }
    info.fill_upper_triangle_with_lower_triangle();
    (info, score)
}

/// Fisher scoring (Newton for the logistic model) with step halving on the
/// deviance, capped at [`MAX_IRLS_ITER`] iterations.
pub fn irls(x: &DMatrix<f64>, y: &[f64], family: Family, power: f64) -> Result<GlmFit> {
    let n = y.len();
    let k = x.ncols();
    if n <= k {
        return Err(Error::Data(format!("{n} observations for {k} coefficients")));
    }
    let gram = x.transpose() * x;
    let scale: Vec<f64> = (0..k).map(|a| gram[(a, a)].sqrt().max(f64::MIN_POSITIVE)).collect();
    let scaled = DMatrix::from_fn(k, k, |a, b| gram[(a, b)] / (scale[a] * scale[b]));
    if scaled.symmetric_eigen().eigenvalues.min() < 1e-10 {
        return Err(Error::Data(
            "covariates are collinear (a constant covariate duplicates the intercept?)".into(),
        ));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(k);
    beta[0] = match family {
        Family::LogitBernoulli => {
            if ybar <= 0.0 || ybar >= 1.0 {
                return Err(Error::Convergence("separation detected: response is constant".into()));
            }
            (ybar / (1.0 - ybar)).ln()
        }
        Family::TweedieLogLink => {
            if ybar <= 0.0 {
                return Err(Error::Data("tweedie response is identically zero".into()));
            }
            ybar.ln()
        }
    };
    let mut cur = evaluate(x, y, &beta, family, power);
    for iter in 1..=MAX_IRLS_ITER {
        let (w, s) = working(y, &cur.mu, family, power);
        let (info, score) = info_and_score(x, &w, &s);
        let grad_norm = score.amax();
        if grad_norm < GRAD_TOL {
            return finish(x, y, beta, cur, info, family, power, iter - 1, grad_norm);
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("information matrix is singular".into()))?;
        let step = chol.solve(&score);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &beta + &step * t;
            let ev = evaluate(x, y, &trial, family, power);
            if ev.deviance.is_finite() && ev.deviance <= cur.deviance + 1e-10 * (1.0 + cur.deviance.abs()) {
                beta = trial;
                cur = ev;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // at the deviance floor only rounding blocks progress
            if grad_norm < 1e3 * GRAD_TOL {
                return finish(x, y, beta, cur, info, family, power, iter, grad_norm);
            }
            return Err(Error::Convergence(format!("IRLS step halving failed (gradient {grad_norm:e})")));
        }
        let eta_max = (x * &beta).amax();
        if family == Family::LogitBernoulli && eta_max > MAX_ETA {
            return Err(Error::Convergence(
                "separation detected: linear predictor diverges".into(),
            ));
        }
    }
    Err(Error::Convergence(format!("IRLS did not converge in {MAX_IRLS_ITER} iterations")))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    x: &DMatrix<f64>,
    y: &[f64],
    beta: DVector<f64>,
    cur: Eval,
    info: DMatrix<f64>,
    family: Family,
    power: f64,
    iterations: usize,
    grad_norm: f64,
) -> Result<GlmFit> {
    let n = y.len();
    let k = x.ncols();
    let phi = match family {
        Family::LogitBernoulli => 1.0,
        Family::TweedieLogLink => {
            let pearson: f64 =
                y.iter().zip(cur.mu.iter()).map(|(&yi, &m)| (yi - m).powi(2) / m.powf(power)).sum();
            pearson / (n - k) as f64
        }
    };
    let inv = info.try_inverse().ok_or_else(|| Error::Numerical("singular information".into()))?;
    let std_errors = (0..k).map(|a| (phi * inv[(a, a)]).sqrt()).collect();
    Ok(GlmFit { beta: beta.iter().copied().collect(), std_errors, phi, iterations, grad_norm })
}
