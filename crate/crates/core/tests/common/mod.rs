#![allow(dead_code)]

pub mod cells;
pub mod derivatives;

use lapsecop_core::copula::std_normal_cdf;
use lapsecop_core::distributions::{BernoulliParams, Triplet, TweedieParams};
use lapsecop_core::estimation::{
    fit_pairwise, pair_density, pairwise_asymptotic_cov, CrossSection, PairStructure, PairwiseMoments,
};
use lapsecop_core::gmm::{gmm_covariance, MomentModel};
use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central difference refined by one Richardson step.
pub fn richardson<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

/// Relative error with a floor on the denominator for derivatives near zero.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

/// Random correlation matrix with off-diagonals of moderate size.
pub fn random_corr(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let k = 2;
    let a = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0) * scale);
    let mut s = &a * a.transpose();
    for i in 0..d {
        s[(i, i)] += 1.0;
    }
    let sd: Vec<f64> = (0..d).map(|i| s[(i, i)].sqrt()).collect();
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { s[(i, j)] / (sd[i] * sd[j]) })
}

pub fn random_u(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(0.05..0.95)).collect()
}

/// Copy of `m` with the symmetric pair `(a, b)` shifted by `h`.
pub fn bump(m: &DMatrix<f64>, a: usize, b: usize, h: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    out[(a, b)] += h;
    out[(b, a)] += h;
    out
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Composite Gauss-Legendre integral over `[a, b]` split into `panels`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, rule: &[(f64, f64)]) -> f64 {
    let w = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * w;
        for &(x, wt) in rule {
            s += wt * 0.5 * w * f(lo + 0.5 * w * (x + 1.0));
        }
    }
    s
}

/// `Phi_d(x; R)` by conditioning on the last coordinate and integrating on a
/// Gauss-Legendre grid, recursing down to the bivariate routine.
pub fn mvn_oracle(x: &[f64], r: &DMatrix<f64>) -> f64 {
    use lapsecop_core::copula::{mvn_cdf, CorrMatrix};
    let d = x.len();
    if d <= 2 {
        return mvn_cdf(x, &CorrMatrix::new(r.clone()).unwrap(), 1e-6).unwrap().value;
    }
    let last = d - 1;
    let upper = x[last].min(8.5);
    if upper <= -8.5 {
        return 0.0;
    }
    let rule = gauss_legendre(20);
    let rest = last;
    let sd: Vec<f64> = (0..rest).map(|i| (1.0 - r[(i, last)].powi(2)).sqrt()).collect();
    let rc = DMatrix::from_fn(rest, rest, |i, j| {
        if i == j {
            1.0
        } else {
            (r[(i, j)] - r[(i, last)] * r[(j, last)]) / (sd[i] * sd[j])
        }
    });
    let panels = ((upper + 8.5) / 3.0).ceil() as usize;
    integrate(
        |t| {
            let xs: Vec<f64> = (0..rest).map(|i| (x[i] - r[(i, last)] * t) / sd[i]).collect();
            (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt() * mvn_oracle(&xs, &rc)
        },
        -8.5,
        upper,
        panels,
        &rule,
    )
}

pub fn random_tweedie(rng: &mut ChaCha8Rng) -> TweedieParams {
    TweedieParams::new(rng.random_range(0.3..4.0), rng.random_range(0.5..3.0), rng.random_range(1.3..1.8))
        .unwrap()
}

/// Either the zero atom or a positive value drawn above it.
pub fn random_triplet(rng: &mut ChaCha8Rng, zero: bool) -> Triplet {
    let tw = random_tweedie(rng);
    if zero {
        return tw.triplet(0.0).unwrap();
    }
    let p0 = tw.pzero();
    let u = p0 + (1.0 - p0) * rng.random_range(0.05..0.95);
    tw.triplet(tw.quantile(u).unwrap()).unwrap()
}

pub fn random_pair(rng: &mut ChaCha8Rng) -> (Triplet, Triplet) {
    let (zj, zk) = (rng.random_bool(0.5), rng.random_bool(0.5));
    (random_triplet(rng, zj), random_triplet(rng, zk))
}

/// Marginal law of one simulated outcome.
#[derive(Debug, Clone, Copy)]
pub enum Margin {
    Tweedie(TweedieParams),
    Bernoulli(f64),
}

impl Margin {
    pub fn draw(&self, u: f64) -> f64 {
        match self {
            Margin::Tweedie(t) => t.quantile(u).unwrap(),
            Margin::Bernoulli(pi) => (u > 1.0 - pi) as u8 as f64,
        }
    }

    pub fn triplet(&self, y: f64) -> Triplet {
        match self {
            Margin::Tweedie(t) => t.triplet(y).unwrap(),
            Margin::Bernoulli(pi) => {
                BernoulliParams::new(*pi).unwrap().triplet(y as u8)
            }
        }
    }
}

/// `n` draws from the Gaussian copula with correlation `r` and the given
/// margins, returned as true marginal triplets.
pub fn simulate_cross_section(rng: &mut ChaCha8Rng, n: usize, r: &DMatrix<f64>, margins: &[Margin]) -> CrossSection {
    let l = r.clone().cholesky().unwrap().l();
    let p = margins.len();
    let obs = (0..n)
        .map(|_| {
            let e = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &l * e;
            (0..p)
                .map(|j| {
                    let u = std_normal_cdf(z[j]).clamp(1e-16, 1.0 - 1e-16);
                    margins[j].triplet(margins[j].draw(u))
                })
                .collect()
        })
        .collect();
    CrossSection { obs }
}

/// Correlation matrix with the given upper-triangle entries in pair order.
pub fn corr_from_pairs(p: usize, rho: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::identity(p, p);
    let mut idx = 0;
    for j in 0..p {
        for k in j + 1..p {
            m[(j, k)] = rho[idx];
            m[(k, j)] = rho[idx];
            idx += 1;
        }
    }
    m
}

/// Component means and their standard errors over rows.
pub fn mean_and_se(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mean: Vec<f64> = (0..k).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let se = (0..k)
        .map(|c| (rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}

/// Total mass of a pair density: atoms summed, continuous parts integrated
/// in `u = F(y)`, where `f(y) dy = du`.
pub fn pair_mass(mj: Margin, mk: Margin, rho: f64) -> f64 {
    let rule = gauss_legendre(12);
    let dens = |yj: f64, yk: f64| {
        let (tj, tk) = (mj.triplet(yj), mk.triplet(yk));
        let jac = |t: &Triplet| if t.is_discrete() { 1.0 } else { t.density };
        pair_density(&tj, &tk, rho).unwrap() / (jac(&tj) * jac(&tk))
    };
    match (mj, mk) {
        (Margin::Tweedie(a), Margin::Tweedie(b)) => {
            let (pa, pb) = (a.pzero(), b.pzero());
            let q = |t: &TweedieParams, u: f64| t.quantile(u).unwrap();
            dens(0.0, 0.0)
                + integrate(|u| dens(q(&a, u), 0.0), pa, 1.0, 4, &rule)
                + integrate(|v| dens(0.0, q(&b, v)), pb, 1.0, 4, &rule)
                + integrate(|u| integrate(|v| dens(q(&a, u), q(&b, v)), pb, 1.0, 4, &rule), pa, 1.0, 4, &rule)
        }
        (Margin::Bernoulli(_), Margin::Tweedie(b)) => {
            let pb = b.pzero();
            let q = |u: f64| b.quantile(u).unwrap();
            [0.0, 1.0]
                .iter()
                .map(|&l| dens(l, 0.0) + integrate(|v| dens(l, q(v)), pb, 1.0, 4, &rule))
                .sum()
        }
        (Margin::Tweedie(a), Margin::Bernoulli(_)) => {
            let pa = a.pzero();
            let q = |u: f64| a.quantile(u).unwrap();
            [0.0, 1.0]
                .iter()
                .map(|&l| dens(0.0, l) + integrate(|u| dens(q(u), l), pa, 1.0, 4, &rule))
                .sum()
        }
        (Margin::Bernoulli(_), Margin::Bernoulli(_)) => [0.0, 1.0].iter().flat_map(|&a| [0.0, 1.0].map(|b| dens(a, b))).sum(),
    }
}

/// Smallest eigenvalue of `V_PL - V_GMM`, both evaluated at the pairwise
/// estimate.
pub fn efficiency_gap(data: &CrossSection, structure: PairStructure) -> f64 {
    let r = structure.n_params(data.p());
    let pl = fit_pairwise(data, structure, &vec![0.0; r]).unwrap();
    let v_pl = pairwise_asymptotic_cov(data, structure, &pl.theta).unwrap();
    let model = PairwiseMoments::new(data, structure).unwrap();
    assert!(model.admissible(&pl.theta));
    let v_gmm = gmm_covariance(&model, &pl.theta).unwrap();
    (v_pl - v_gmm).symmetric_eigen().eigenvalues.min()
}

/// Tweedie margins with means and dispersions growing by outcome.
pub fn tweedie_margins(p: usize) -> Vec<Margin> {
    (0..p)
        .map(|j| Margin::Tweedie(TweedieParams::new(0.8 + 0.4 * j as f64, 1.0 + 0.5 * j as f64, 1.67).unwrap()))
        .collect()
}

/// Three designs for comparing pairwise and GMM efficiency.
pub fn efficiency_designs() -> Vec<(DMatrix<f64>, Vec<Margin>, PairStructure)> {
    let tw = TweedieParams::new(1.5, 1.2, 1.67).unwrap();
    vec![
        (corr_from_pairs(3, &[-0.2, 0.2, 0.1]), tweedie_margins(3), PairStructure::Unstructured),
        (
            corr_from_pairs(3, &[0.3, -0.1, 0.25]),
            vec![Margin::Bernoulli(0.3), Margin::Tweedie(tw), Margin::Tweedie(tw)],
            PairStructure::Unstructured,
        ),
        (corr_from_pairs(4, &[0.2; 6]), tweedie_margins(4), PairStructure::Exchangeable),
    ]
}
