//! Trivariate normal probabilities by Plackett's formula.
//!
//! Starting from the matrix with `r12 = r13 = 0`, where the probability
//! factorizes, the derivative in the correlations is integrated along the
//! path `r1j(x) = sin(x asin r1j)`, `x in [0, 1]`. The largest
//! correlation is kept as `r23` so the path stays well inside the
//! correlation set.

use std::f64::consts::{FRAC_PI_2, PI};

use super::bvn::bvn_cdf;
use super::normal::std_normal_cdf;

const TVN_TOL: f64 = 1e-14;
const MAX_DEPTH: usize = 30;

// Gauss-Kronrod 7-15 pair on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let s = f(c - h * XGK[i]) + f(c + h * XGK[i]);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let (v, err) = kronrod(f, a, b);
    if err <= tol || depth >= MAX_DEPTH {
        return v;
    }
    let c = 0.5 * (a + b);
    adaptive(f, a, c, 0.5 * tol, depth + 1) + adaptive(f, c, b, 0.5 * tol, depth + 1)
}

/// `sin(x)` and `cos(x)^2`, accurate near `|x| = pi/2`.
fn sincs(x: f64) -> (f64, f64) {
    let ee = (FRAC_PI_2 - x.abs()).powi(2);
    if ee < 5e-5 {
        (x.signum() * (1.0 - ee * (1.0 - ee / 12.0) / 2.0), ee * (1.0 - ee / 3.0))
    } else {
        let s = x.sin();
        (s, 1.0 - s * s)
    }
}

fn plackett_integrand(ba: f64, bb: f64, bc: f64, ra: f64, rb: f64, r: f64, rr: f64) -> f64 {
    let dt = rr * (rr - (ra - rb).powi(2) - 2.0 * ra * rb * (1.0 - r));
    if dt <= 0.0 {
        return 0.0;
    }
    let bt = (bc * rr + ba * (r * rb - ra) + bb * (r * ra - rb)) / dt.sqrt();
    let ft = (ba - r * bb).powi(2) / rr + bb * bb;
    if bt <= -10.0 || ft >= 100.0 {
        return 0.0;
    }
    let f = (-0.5 * ft).exp();
    if bt < 10.0 {
        f * std_normal_cdf(bt)
    } else {
        f
    }
}

/// `Pr(Z1 <= h1, Z2 <= h2, Z3 <= h3)` for finite limits.
pub(crate) fn tvn(h: [f64; 3], r12: f64, r13: f64, r23: f64) -> f64 {
    let [mut h1, mut h2, mut h3] = h;
    let (mut r12, mut r13, mut r23) = (r12, r13, r23);
    if r12.abs() > r13.abs() {
        std::mem::swap(&mut h2, &mut h3);
        std::mem::swap(&mut r12, &mut r13);
    }
    if r13.abs() > r23.abs() {
        std::mem::swap(&mut h1, &mut h2);
        std::mem::swap(&mut r13, &mut r23);
    }
    let eps = 1e-15;
    if r12.abs() + r13.abs() < eps {
        return std_normal_cdf(h1) * bvn_cdf(h2, h3, r23);
    }
    if r13.abs() + r23.abs() < eps {
        return std_normal_cdf(h3) * bvn_cdf(h1, h2, r12);
    }
    if r12.abs() + r23.abs() < eps {
        return std_normal_cdf(h2) * bvn_cdf(h1, h3, r13);
    }
    if 1.0 - r23 < eps {
        return bvn_cdf(h1, h2.min(h3), r12);
    }
    if r23 + 1.0 < eps {
        return if h2 > -h3 { (bvn_cdf(h1, h2, r12) - bvn_cdf(h1, -h3, r12)).max(0.0) } else { 0.0 };
    }
    let (a12, a13) = (r12.asin(), r13.asin());
    let f = |x: f64| {
        let (s12, c12) = sincs(a12 * x);
        let (s13, c13) = sincs(a13 * x);
        let mut v = 0.0;
        if a12 != 0.0 {
            v += a12 * plackett_integrand(h1, h2, h3, s13, r23, s12, c12);
        }
        if a13 != 0.0 {
            v += a13 * plackett_integrand(h1, h3, h2, s12, r23, s13, c13);
        }
        v
    };
    let base = std_normal_cdf(h1) * bvn_cdf(h2, h3, r23);
    (base + adaptive(&f, 0.0, 1.0, TVN_TOL * 2.0 * PI, 0) / (2.0 * PI)).clamp(0.0, 1.0)
}
