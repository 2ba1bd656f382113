//! Multivariate normal orthant probabilities `Pr(Z <= x)` for correlated
//! standard normals.
//!
//! Dimensions one and two are exact, three uses Plackett's formula integrated
//! adaptively along a correlation path, and four and above use Genz's
//! separation-of-variables transform integrated by randomized lattice rules
//! with a fixed seed, so repeated calls return identical values.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bvn::bvn_cdf;
use super::tvn::tvn;
use super::corr::CorrMatrix;
use super::normal::{norm_inv, std_normal_cdf, std_normal_pdf};
use crate::{Error, Result};

pub const QMC_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
const QMC_SHIFTS: usize = 10;
const QMC_START: usize = 256;
const QMC_MAX: usize = 1 << 18;
const DEGENERATE_VAR: f64 = 1e-12;
const SQRT_PRIMES: [f64; 12] = [
    1.414_213_562_373_095,
    1.732_050_807_568_877_2,
    2.236_067_977_499_79,
    2.645_751_311_064_590_7,
    3.316_624_790_355_4,
    3.605_551_275_463_989,
    4.123_105_625_617_661,
    4.358_898_943_540_674,
    4.795_831_523_312_719,
    5.385_164_807_134_504,
    5.567_764_362_830_022,
    6.082_762_530_298_219,
];

/// Largest supported dimension.
pub const MAX_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvnEstimate {
    pub value: f64,
    /// Standard error of the estimate (zero-ish for the deterministic paths).
    pub error: f64,
}

/// Default absolute tolerance by dimension.
pub fn default_tol(dim: usize) -> f64 {
    if dim <= 4 {
        1e-6
    } else {
        5e-6
    }
}

/// `Pr(Z_1 <= x_1, ..., Z_d <= x_d)` with `Z ~ N(0, R)`. Entries equal to
/// `+inf` are marginalized out.
pub fn mvn_cdf(x: &[f64], r: &CorrMatrix, tol: f64) -> Result<MvnEstimate> {
    if x.len() != r.dim() {
        return Err(Error::domain(format!("{} limits for a {}-dim matrix", x.len(), r.dim())));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    mvn_cdf_raw(x, r.as_matrix(), tol)
}

/// As [`mvn_cdf`] with the default tolerance, returning only the value. The
/// tolerance shrinks with the probability so small terms
/// keep their relative accuracy.
pub(crate) fn phi_d(x: &[f64], r: &DMatrix<f64>) -> Result<f64> {
    let d = x.iter().filter(|v| **v != f64::INFINITY).count();
    Ok(mvn_rel(x, r, default_tol(d), REL_FLOOR)?.value)
}

const REL_FLOOR: f64 = 1e-6;

pub(crate) fn mvn_cdf_raw(x: &[f64], r: &DMatrix<f64>, tol: f64) -> Result<MvnEstimate> {
    mvn_rel(x, r, tol, 1.0)
}

/// Stops once the error is below `tol * clamp(value, rel_floor, 1)`, or
/// accepts an absolute `tol` when the relative target is out of reach.
fn mvn_rel(x: &[f64], r: &DMatrix<f64>, tol: f64, rel_floor: f64) -> Result<MvnEstimate> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("NaN integration limit"));
    }
    if x.iter().any(|v| *v == f64::NEG_INFINITY) {
        return Ok(exact(0.0));
    }
    let idx: Vec<usize> = (0..x.len()).filter(|&i| x[i] != f64::INFINITY).collect();
    if idx.len() > MAX_DIM {
        return Err(Error::domain(format!("dimension {} exceeds {MAX_DIM}", idx.len())));
    }
    let blocks = components(r, &idx);
    if blocks.len() > 1 {
        // independent blocks factorize
        let mut value = 1.0;
        let mut error = 0.0;
        for blk in &blocks {
            let sub = mvn_block(x, r, blk, tol, rel_floor)?;
            error = error * sub.value + value * sub.error;
            value *= sub.value;
        }
        return Ok(MvnEstimate { value, error });
    }
    let b: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    match b.len() {
        0 => Ok(exact(1.0)),
        1 => Ok(exact(std_normal_cdf(b[0]))),
        2 => Ok(exact(bvn_cdf(b[0], b[1], r[(idx[0], idx[1])]))),
        3 => Ok(exact(tvn(
            [b[0], b[1], b[2]],
            r[(idx[0], idx[1])],
            r[(idx[0], idx[2])],
            r[(idx[1], idx[2])],
        ))),
        _ => genz_qmc(&b, &super::corr::select(r, &idx), tol, rel_floor),
    }
}

fn mvn_block(x: &[f64], r: &DMatrix<f64>, blk: &[usize], tol: f64, rel_floor: f64) -> Result<MvnEstimate> {
    let xb: Vec<f64> = blk.iter().map(|&i| x[i]).collect();
    mvn_rel(&xb, &super::corr::select(r, blk), tol, rel_floor)
}

/// Connected components of `idx` under nonzero correlation.
fn components(r: &DMatrix<f64>, idx: &[usize]) -> Vec<Vec<usize>> {
    let mut label: Vec<usize> = (0..idx.len()).collect();
    fn root(label: &mut [usize], mut i: usize) -> usize {
        while label[i] != i {
            label[i] = label[label[i]];
            i = label[i];
        }
        i
    }
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            if r[(idx[a], idx[b])] != 0.0 {
                let (ra, rb) = (root(&mut label, a), root(&mut label, b));
                label[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for a in 0..idx.len() {
        let ra = root(&mut label, a);
        match seen.iter().position(|&s| s == ra) {
            Some(pos) => out[pos].push(idx[a]),
            None => {
                seen.push(ra);
                out.push(vec![idx[a]]);
            }
        }
    }
    out
}

fn exact(value: f64) -> MvnEstimate {
    MvnEstimate { value, error: 0.0 }
}

/// Cholesky factor with Genz-Bretz variable reordering; returns the permuted
/// limits and the lower-triangular factor.
fn reorder_cholesky(b: &[f64], r: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let d = b.len();
    let mut a = r.clone();
    let mut b = b.to_vec();
    let mut c = DMatrix::<f64>::zeros(d, d);
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut best = i;
        let mut best_p = f64::INFINITY;
        for j in i..d {
            let s: f64 = (0..i).map(|k| c[(j, k)] * y[k]).sum();
            let v = a[(j, j)] - (0..i).map(|k| c[(j, k)] * c[(j, k)]).sum::<f64>();
            let p = if v > DEGENERATE_VAR {
                std_normal_cdf((b[j] - s) / v.sqrt())
            } else if s <= b[j] {
                1.0
            } else {
                0.0
            };
            if p < best_p {
                best_p = p;
                best = j;
            }
        }
        if best != i {
            a.swap_rows(i, best);
            a.swap_columns(i, best);
            b.swap(i, best);
            c.swap_rows(i, best);
        }
        let v = a[(i, i)] - (0..i).map(|k| c[(i, k)] * c[(i, k)]).sum::<f64>();
        let s: f64 = (0..i).map(|k| c[(i, k)] * y[k]).sum();
        if v > DEGENERATE_VAR {
            let cii = v.sqrt();
            c[(i, i)] = cii;
            for j in i + 1..d {
                let num = a[(j, i)] - (0..i).map(|k| c[(j, k)] * c[(i, k)]).sum::<f64>();
                c[(j, i)] = num / cii;
            }
            let bt = (b[i] - s) / cii;
            let pb = std_normal_cdf(bt);
            y[i] = if pb > 1e-300 { -std_normal_pdf(bt) / pb } else { bt };
        } else {
            y[i] = (b[i] - s).min(0.0);
        }
    }
    (b, c)
}

fn genz_qmc(b: &[f64], r: &DMatrix<f64>, tol: f64, rel_floor: f64) -> Result<MvnEstimate> {
    let d = b.len();
    let (b, c) = reorder_cholesky(b, r);
    let first = if c[(0, 0)] > 0.0 { std_normal_cdf(b[0] / c[(0, 0)]) } else if b[0] >= 0.0 { 1.0 } else { 0.0 };
    if first == 0.0 {
        return Ok(exact(0.0));
    }
    let dims = d - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(QMC_SEED);
    let shifts: Vec<Vec<f64>> =
        (0..QMC_SHIFTS).map(|_| (0..dims).map(|_| rng.random::<f64>()).collect()).collect();
    let gens: Vec<f64> = SQRT_PRIMES[..dims].iter().map(|q| q.fract()).collect();

    let mut w = vec![0.0; dims];
    let mut ys = vec![0.0; d];
    let integrand = |w: &[f64], ys: &mut [f64]| -> f64 {
        let mut f = first;
        ys[0] = norm_inv(w[0] * first);
        for i in 1..d {
            let s: f64 = (0..i).map(|k| c[(i, k)] * ys[k]).sum();
            let e = if c[(i, i)] > 0.0 {
                std_normal_cdf((b[i] - s) / c[(i, i)])
            } else if s <= b[i] {
                1.0
            } else {
                0.0
            };
            f *= e;
            if f == 0.0 {
                return 0.0;
            }
            if i + 1 < d {
                ys[i] = if c[(i, i)] > 0.0 { norm_inv(w[i] * e) } else { 0.0 };
            }
        }
        f
    };

    // lattice points 1..n of one level include those of the previous level
    let mut n = QMC_START;
    let mut done = 0;
    let mut sums = [0.0; QMC_SHIFTS];
    let mut last = MvnEstimate { value: f64::NAN, error: f64::INFINITY };
    let mut wa = vec![0.0; dims];
    while n <= QMC_MAX {
        let mut means = [0.0; QMC_SHIFTS];
        for (m, shift) in shifts.iter().enumerate() {
            for i in done + 1..=n {
                for k in 0..dims {
                    let v = (i as f64 * gens[k] + shift[k]).fract();
                    let t = 1.0 - (2.0 * v - 1.0).abs();
                    w[k] = t;
                    wa[k] = 1.0 - t;
                }
                sums[m] += 0.5 * (integrand(&w, &mut ys) + integrand(&wa, &mut ys));
            }
            means[m] = sums[m] / n as f64;
        }
        done = n;
        let mean = means.iter().sum::<f64>() / QMC_SHIFTS as f64;
        let var = means.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / ((QMC_SHIFTS - 1) * QMC_SHIFTS) as f64;
        last = MvnEstimate { value: mean.clamp(0.0, 1.0), error: var.sqrt() };
        if last.error <= tol * last.value.clamp(rel_floor, 1.0) {
            return Ok(last);
        }
        n *= 2;
    }
    if last.error <= tol {
        return Ok(last);
    }
    Err(Error::Integration { tol, achieved: last.error })
}
