//! Fixtures for dropout-conditional cells.

use super::{gauss_legendre, integrate};
use lapsecop_core::distributions::{Triplet, TweedieParams};
use lapsecop_core::dropout::{cell_eval_path, Cell, EvalPath};
use lapsecop_core::temporal::{AssociationParams, ParamId, TemporalKind, TemporalSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_kind(rng: &mut ChaCha8Rng) -> TemporalKind {
    [TemporalKind::Ar1, TemporalKind::Ma1][rng.random_range(0..2)]
}

pub fn random_params(rng: &mut ChaCha8Rng, m: usize, temporal: bool) -> AssociationParams {
    loop {
        let spec = |rng: &mut ChaCha8Rng| {
            if temporal {
                TemporalSpec::new(random_kind(rng), rng.random_range(-0.6..0.6), m).unwrap()
            } else {
                TemporalSpec::independence(m)
            }
        };
        let lapse = spec(rng);
        let streams = vec![spec(rng), spec(rng)];
        let rho_l = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let rho_cross = vec![rng.random_range(-0.6..0.6)];
        if let Ok(a) = AssociationParams::new(rho_l, rho_cross, lapse, streams) {
            return a;
        }
    }
}

pub fn random_cell(rng: &mut ChaCha8Rng, m: usize) -> Cell {
    let t = rng.random_range(1..=m + 1);
    let s = rng.random_range(1..=t.min(m));
    Cell { j: 0, k: 1, s, t }
}

pub fn eval(
    tj: &Triplet,
    tk: &Triplet,
    cell: Cell,
    fl0: &[f64],
    a: &AssociationParams,
    ids: &[ParamId],
    path: EvalPath,
) -> Option<(f64, Vec<f64>)> {
    let e = cell_eval_path(tj, tk, cell, fl0, a, ids, true, path).unwrap();
    // floored cells sit beyond double precision in the far tails
    (!e.floored).then_some((e.density, e.score))
}

/// Sum of a conditional density over the zero atoms and integral over the
/// positive parts of two Tweedie outcomes.
pub fn conditional_mass(tw: [TweedieParams; 2], cell: Cell, fl0: &[f64], a: &AssociationParams) -> f64 {
    let rule = gauss_legendre(10);
    let dens = |yj: f64, yk: f64| {
        let (tj, tk) = (tw[0].triplet(yj).unwrap(), tw[1].triplet(yk).unwrap());
        let e = cell_eval_path(&tj, &tk, cell, fl0, a, &[], false, EvalPath::General).unwrap();
        // integrate in u = F(y) on the positive part
        let jac = |t: &Triplet| if t.is_discrete() { 1.0 } else { t.density };
        e.density / (jac(&tj) * jac(&tk))
    };
    let q = |i: usize, u: f64| tw[i].quantile(u).unwrap();
    let (p0j, p0k) = (tw[0].pzero(), tw[1].pzero());
    let atom = dens(0.0, 0.0);
    let line_j = integrate(|u| dens(q(0, u), 0.0), p0j, 1.0, 4, &rule);
    let line_k = integrate(|u| dens(0.0, q(1, u)), p0k, 1.0, 4, &rule);
    let quad = integrate(|u| integrate(|v| dens(q(0, u), q(1, v)), p0k, 1.0, 3, &rule), p0j, 1.0, 3, &rule);
    atom + line_j + line_k + quad
}
