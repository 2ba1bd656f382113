//! Analytic copula derivatives against Richardson-refined central
//! differences. Every comparison goes through `check!`, which counts it.

use std::cell::Cell;

use super::{bump, random_corr, random_u, rel_err, richardson};
use lapsecop_core::copula::trivariate::{
    drho_partial23, drho_partial3, partial23, partial3, TriCorr, TriParam,
};
use lapsecop_core::copula::{
    bvn_cdf, copula_cdf, copula_density2, copula_h1, copula_partial2_md, copula_partial_md,
    drho_copula_cdf2, drho_copula_h, drho_partial2_copula, drho_partial_copula, h1_d, h2_d,
    normal_score, AssocMatrix, CorrMatrix,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

thread_local! {
    static CHECKS: Cell<usize> = const { Cell::new(0) };
}

macro_rules! check {
    ($($t:tt)*) => {{
        CHECKS.with(|c| c.set(c.get() + 1));
        assert!($($t)*);
    }};
}

/// Comparisons made on this thread so far.
pub fn checks() -> usize {
    CHECKS.with(Cell::get)
}

/// Every suite in order, with its name.
pub const SUITES: &[(&str, fn())] = &[
    ("plackett_matches_difference_in_rho", plackett_matches_difference_in_rho),
    ("h_function_and_its_rho_derivative", h_function_and_its_rho_derivative),
    ("density2_closed_form_and_normalization", density2_closed_form_and_normalization),
    ("h1_d_matches_difference_in_limit", h1_d_matches_difference_in_limit),
    ("h2_d_matches_difference_in_correlation", h2_d_matches_difference_in_correlation),
    ("single_partial_matches_difference_of_copula", single_partial_matches_difference_of_copula),
    ("mixed_partial_matches_second_difference", mixed_partial_matches_second_difference),
    ("partial_rho_derivatives_match_differences", partial_rho_derivatives_match_differences),
    ("trivariate_specials_agree_with_general_engine_and_differences", trivariate_specials_agree_with_general_engine_and_differences),
];

fn assoc(m: &DMatrix<f64>) -> AssocMatrix {
    AssocMatrix::new(m.clone()).unwrap()
}

fn corr(m: &DMatrix<f64>) -> CorrMatrix {
    CorrMatrix::new(m.clone()).unwrap()
}

fn mvn(x: &[f64], m: &DMatrix<f64>) -> f64 {
    super::mvn_oracle(x, m)
}

fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn plackett_matches_difference_in_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (u1, u2) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        let rho = rng.random_range(-0.9..0.9);
        let (z1, z2) = (normal_score(u1), normal_score(u2));
        let fd = richardson(|r| bvn_cdf(z1, z2, r), rho, 1e-4);
        let an = drho_copula_cdf2(u1, u2, rho).unwrap();
        check!(rel_err(an, fd, 1e-4) < 1e-5, "({u1},{u2},{rho}): {an} vs {fd}");
    }
}

pub fn h_function_and_its_rho_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rho = 0.5;
    let fd = richardson(|v| copula_cdf(&[0.3, v], &assoc(&bump(&DMatrix::identity(2, 2), 0, 1, rho))).unwrap(), 0.7, 1e-4);
    check!(rel_err(copula_h1(0.3, 0.7, rho).unwrap(), fd, 1e-4) < 1e-5);
    for _ in 0..300 {
        let (u1, u2) = (rng.random_range(0.02..0.98), rng.random_range(0.02..0.98));
        let rho = rng.random_range(-0.8..0.8);
        let fd = richardson(|r| copula_h1(u1, u2, r).unwrap(), rho, 1e-4);
        let an = drho_copula_h(u1, u2, rho).unwrap();
        check!(rel_err(an, fd, 1e-4) < 1e-6, "{an} vs {fd}");
    }
    let fd = richardson(|r| copula_h1(0.3, 0.7, r).unwrap(), 0.2, 1e-4);
    check!(rel_err(drho_copula_h(0.3, 0.7, 0.2).unwrap(), fd, 1e-8) < 1e-6);
}

pub fn density2_closed_form_and_normalization() {
    // mixed difference of the bivariate normal cdf at the origin
    let h = 1e-3;
    let f = |a: f64, b: f64| bvn_cdf(a, b, 0.5);
    let mixed = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let c = copula_density2(0.5, 0.5, 0.5).unwrap();
    check!((c - mixed / (phi0 * phi0)).abs() < 1e-5);
    check!((c - 1.154_700_538_379_251_5).abs() < 1e-12);

    let rule = super::gauss_legendre(20);
    let total = super::integrate(
        |a| super::integrate(|b| copula_density2(a, b, 0.3).unwrap(), 0.0, 1.0, 40, &rule),
        0.0,
        1.0,
        40,
        &rule,
    );
    check!((total - 1.0).abs() < 1e-4, "{total}");
}

pub fn h1_d_matches_difference_in_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for d in [2, 3] {
        for _ in 0..100 {
            let r = random_corr(&mut rng, d, 0.8);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k = rng.random_range(0..d);
            let fd = richardson(
                |v| {
                    let mut y = x.clone();
                    y[k] = v;
                    mvn(&y, &r)
                },
                x[k],
                1e-3,
            );
            let an = h1_d(&x, &corr(&r), k).unwrap();
            check!(rel_err(an, fd, 1e-3) < 1e-4, "d={d}: {an} vs {fd}");
        }
    }
}

pub fn h2_d_matches_difference_in_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (d, cases) in [(3, 200), (4, 20), (5, 4)] {
        for _ in 0..cases {
            let r = random_corr(&mut rng, d, 0.7);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let i = rng.random_range(0..d);
            let j = (i + rng.random_range(1..d)) % d;
            let fd = richardson(|h| mvn(&x, &bump(&r, i, j, h)), 0.0, 1e-2);
            let an = h2_d(&x, &assoc(&r), i, j).unwrap();
            check!(rel_err(an, fd, 1e-3) < 1e-4, "d={d}: {an} vs {fd}");
        }
    }
}

pub fn single_partial_matches_difference_of_copula() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let r2 = bump(&DMatrix::identity(2, 2), 0, 1, 0.35);
    check!(
        (copula_partial_md(&[0.3, 0.7], &assoc(&r2), 1).unwrap() - copula_h1(0.3, 0.7, 0.35).unwrap()).abs()
            < 1e-14
    );
    for (d, cases) in [(3, 100), (4, 20)] {
        for _ in 0..cases {
            let r = random_corr(&mut rng, d, 0.7);
            let u = random_u(&mut rng, d);
            let z: Vec<f64> = u.iter().map(|&v| normal_score(v)).collect();
            let j = rng.random_range(0..d);
            let fd = richardson(
                |v| {
                    let mut w = z.clone();
                    w[j] = v;
                    mvn(&w, &r)
                },
                z[j],
                1e-2,
            ) / pdf(z[j]);
            let an = copula_partial_md(&u, &assoc(&r), j).unwrap();
            check!(rel_err(an, fd, 1e-3) < 1e-4, "d={d}: {an} vs {fd}");
        }
    }
}

pub fn mixed_partial_matches_second_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (d, cases) in [(3, 50), (4, 10), (5, 2)] {
        for _ in 0..cases {
            let r = random_corr(&mut rng, d, 0.7);
            let u = random_u(&mut rng, d);
            let j = rng.random_range(0..d);
            let k = (j + rng.random_range(1..d)) % d;
            let s = assoc(&r);
            let z: Vec<f64> = u.iter().map(|&v| normal_score(v)).collect();
            let c = |a: f64, b: f64| {
                let mut w = z.clone();
                w[j] += a;
                w[k] += b;
                mvn(&w, &r)
            };
            let mixed = |h: f64| (c(h, h) - c(h, -h) - c(-h, h) + c(-h, -h)) / (4.0 * h * h);
            let h = 2e-2;
            let fd = (4.0 * mixed(h / 2.0) - mixed(h)) / 3.0 / (pdf(z[j]) * pdf(z[k]));
            let an = copula_partial2_md(&u, &s, j, k).unwrap();
            check!(rel_err(an, fd, 1e-2) < 1e-3, "d={d}: {an} vs {fd}");
        }
    }
}

pub fn partial_rho_derivatives_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (d, cases) in [(2, 50), (3, 100), (4, 60), (5, 30)] {
        for _ in 0..cases {
            let r = random_corr(&mut rng, d, 0.7);
            let u = random_u(&mut rng, d);
            let j = rng.random_range(0..d);
            let k = (j + rng.random_range(1..d)) % d;
            let a = rng.random_range(0..d);
            let b = (a + rng.random_range(1..d)) % d;
            if d <= 4 {
                let fd = richardson(|h| copula_partial_md(&u, &assoc(&bump(&r, a, b, h)), j).unwrap(), 0.0, 1e-4);
                let an = drho_partial_copula(&u, &assoc(&r), j, (a, b)).unwrap();
                check!(rel_err(an, fd, 1e-3) < 1e-4, "C_j d={d}: {an} vs {fd}");
            }
            let fd = richardson(|h| copula_partial2_md(&u, &assoc(&bump(&r, a, b, h)), j, k).unwrap(), 0.0, 1e-4);
            let an = drho_partial2_copula(&u, &assoc(&r), j, k, (a, b)).unwrap();
            check!(rel_err(an, fd, 1e-3) < 1e-3, "C_jk d={d}: {an} vs {fd}");
        }
    }
}

pub fn trivariate_specials_agree_with_general_engine_and_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let params = [(TriParam::R12, 0, 1), (TriParam::R13, 0, 2), (TriParam::R23, 1, 2)];
    for _ in 0..200 {
        let m = random_corr(&mut rng, 3, 0.7);
        let c = TriCorr { r12: m[(0, 1)], r13: m[(0, 2)], r23: m[(1, 2)] };
        let u = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let s = assoc(&m);
        check!((partial3(u, c).unwrap() - copula_partial_md(&u, &s, 2).unwrap()).abs() < 1e-12);
        check!((partial23(u, c).unwrap() - copula_partial2_md(&u, &s, 1, 2).unwrap()).abs() < 1e-12);
        for (which, a, b) in params {
            let shift = |h: f64| {
                let mut c2 = c;
                match which {
                    TriParam::R12 => c2.r12 += h,
                    TriParam::R13 => c2.r13 += h,
                    TriParam::R23 => c2.r23 += h,
                }
                c2
            };
            let d3 = drho_partial3(u, c, which).unwrap();
            let fd = richardson(|h| partial3(u, shift(h)).unwrap(), 0.0, 1e-4);
            check!(rel_err(d3, fd, 1e-3) < 1e-4, "C_3 {which:?}: {d3} vs {fd}");
            let engine = drho_partial_copula(&u, &s, 2, (a, b)).unwrap();
            check!((d3 - engine).abs() < 1e-10);

            let d23 = drho_partial23(u, c, which).unwrap();
            let fd = richardson(|h| partial23(u, shift(h)).unwrap(), 0.0, 1e-4);
            check!(rel_err(d23, fd, 1e-3) < 1e-4, "C_23 {which:?}: {d23} vs {fd}");
            let engine = drho_partial2_copula(&u, &s, 1, 2, (a, b)).unwrap();
            check!((d23 - engine).abs() < 1e-10);
        }
    }
    // with r13 = r23 = 0 the r12 derivative of C_3 is the bivariate density
    let c = TriCorr { r12: 0.3, r13: 0.0, r23: 0.0 };
    let u = [0.4, 0.7, 0.5];
    let expect = drho_copula_cdf2(0.4, 0.7, 0.3).unwrap();
    check!((drho_partial3(u, c, TriParam::R12).unwrap() - expect).abs() < 1e-14);
}
