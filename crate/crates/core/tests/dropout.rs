mod common;

use common::cells::{conditional_mass, eval, random_cell, random_params};
use common::{mvn_oracle, random_pair, random_triplet, rel_err, richardson};
use lapsecop_core::copula::normal_score;
use lapsecop_core::distributions::{TweedieParams, Triplet};
use lapsecop_core::estimation::{pair_density, pair_score};
use lapsecop_core::dropout::{lapse_time_prob, Cell, EvalPath};
use lapsecop_core::temporal::{AssociationParams, ParamId, TemporalKind, TemporalSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Conditional density of two zero atoms built from nested-quadrature
/// normal probabilities of the full association matrix.
fn oracle_zero_zero(tj: &Triplet, tk: &Triplet, cell: Cell, fl0: &[f64], a: &AssociationParams) -> f64 {
    let m = a.m();
    let r = a.sigma_pair(cell.j, cell.k, cell.s).unwrap().correlation().into_matrix();
    let prob = |z: &[f64]| {
        let keep: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_finite()).collect();
        if keep.is_empty() {
            return 1.0;
        }
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| r[(keep[i], keep[j])]);
        let x: Vec<f64> = keep.iter().map(|&i| z[i]).collect();
        mvn_oracle(&x, &sub)
    };
    let lapse = |strict: bool| -> Vec<f64> {
        (1..=m)
            .map(|tau| if tau < cell.t || (strict && tau == cell.t) { normal_score(fl0[tau - 1]) } else { f64::INFINITY })
            .collect()
    };
    let mut configs = vec![(1.0, lapse(false))];
    if cell.t <= m {
        configs.push((-1.0, lapse(true)));
    }
    let (mut joint, mut pt) = (0.0, 0.0);
    for (sign, z) in &configs {
        let mut full = z.clone();
        full.extend([f64::INFINITY, f64::INFINITY]);
        pt += sign * prob(&full);
        full[m] = normal_score(tj.cdf);
        full[m + 1] = normal_score(tk.cdf);
        joint += sign * prob(&full);
    }
    joint / pt
}

#[test]
fn general_score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let m = 2;
    let (mut checked, mut floored) = (0, 0);
    for case in 0..150 {
        let a = random_params(&mut rng, m, true);
        let ids = a.all_params(true);
        let cell = random_cell(&mut rng, m);
        let (zj, zk) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let (tj, tk) = (random_triplet(&mut rng, zj), random_triplet(&mut rng, zk));
        let fl0: Vec<f64> = (0..m).map(|_| rng.random_range(0.6..0.95)).collect();
        let Some((dens, score)) = eval(&tj, &tk, cell, &fl0, &a, &ids, EvalPath::General) else {
            floored += 1;
            continue;
        };
        for (q, id) in ids.iter().enumerate() {
            let x0 = a.get(*id);
            let f = |v: f64| {
                let b = a.with(*id, v);
                if zj && zk {
                    oracle_zero_zero(&tj, &tk, cell, &fl0, &b).ln()
                } else {
                    eval(&tj, &tk, cell, &fl0, &b, &[], EvalPath::General).unwrap().0.ln()
                }
            };
            let fd = richardson(f, x0, 1e-3);
            let err = rel_err(score[q], fd, 0.1);
            assert!(err < 1e-4, "case {case} {id} {cell:?}: {} vs {fd} (density {dens})", score[q]);
            checked += 1;
        }
    }
    assert!(checked >= 500 && floored < 5, "{checked} checked, {floored} floored");
}

#[test]
fn reduced_score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let m = 5;
    let (mut checked, mut floored) = (0, 0);
    for case in 0..300 {
        let a = random_params(&mut rng, m, false);
        let ids = a.all_params(false);
        let cell = random_cell(&mut rng, m);
        let (tj, tk) = random_pair(&mut rng);
        let fl0: Vec<f64> = (0..m).map(|_| rng.random_range(0.6..0.95)).collect();
        let Some((_, score)) = eval(&tj, &tk, cell, &fl0, &a, &ids, EvalPath::Auto) else {
            floored += 1;
            continue;
        };
        for (q, id) in ids.iter().enumerate() {
            let f = |v: f64| eval(&tj, &tk, cell, &fl0, &a.with(*id, v), &[], EvalPath::Auto).unwrap().0.ln();
            let fd = richardson(f, a.get(*id), 1e-3);
            assert!(rel_err(score[q], fd, 0.1) < 1e-4, "case {case} {id}: {} vs {fd}", score[q]);
            checked += 1;
        }
    }
    assert!(checked >= 800 && floored < 10, "{checked} checked, {floored} floored");
}

#[test]
fn general_path_reduces_under_identity_loadings() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..200 {
        let m = rng.random_range(1..=4);
        let mut a = random_params(&mut rng, m, false);
        // identity loadings written as zero temporal coefficients
        a.lapse = TemporalSpec::new(TemporalKind::Ar1, 0.0, m).unwrap();
        let ids = a.all_params(false);
        let cell = random_cell(&mut rng, m);
        let (tj, tk) = random_pair(&mut rng);
        let fl0: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..0.97)).collect();
        let general = eval(&tj, &tk, cell, &fl0, &a, &ids, EvalPath::General);
        let reduced = eval(&tj, &tk, cell, &fl0, &a, &ids, EvalPath::Auto);
        let (Some((d_gen, s_gen)), Some((d_red, s_red))) = (general.clone(), reduced.clone()) else {
            assert_eq!(general.is_none(), reduced.is_none(), "case {case}");
            continue;
        };
        assert!(rel_err(d_gen, d_red, 1e-12) < 1e-8, "case {case}: {d_gen} vs {d_red}");
        for (g, r) in s_gen.iter().zip(&s_red) {
            assert!((g - r).abs() < 1e-8 * (1.0 + r.abs()), "case {case}: score {g} vs {r}");
        }
    }
}

#[test]
fn lapse_time_law_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for kind in [TemporalKind::Independence, TemporalKind::Ar1, TemporalKind::Ma1] {
        for _ in 0..100 {
            let m = rng.random_range(1..=6);
            let mut a = random_params(&mut rng, m, false);
            a.lapse = TemporalSpec::new(kind, rng.random_range(-0.8..0.8), m).unwrap();
            let fl0: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..0.99)).collect();
            let probs: Vec<f64> = (1..=m + 1).map(|t| lapse_time_prob(t, &fl0, &a).unwrap()).collect();
            assert!(probs.iter().all(|p| *p > -1e-9), "{probs:?}");
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // the first period is a plain Bernoulli lapse
            assert!((probs[0] - (1.0 - fl0[0])).abs() < 1e-12);
        }
    }
}

#[test]
fn ar1_two_period_lapse_matches_bivariate_normal() {
    let a = AssociationParams::new(
        vec![0.2, 0.1],
        vec![0.3],
        TemporalSpec::new(TemporalKind::Ar1, 0.5, 2).unwrap(),
        vec![TemporalSpec::independence(2); 2],
    )
    .unwrap();
    let fl0 = [0.8, 0.7];
    let r = a.sigma_full().unwrap().correlation().into_matrix();
    let both = mvn_oracle(&[normal_score(0.8), normal_score(0.7), f64::INFINITY], &r.view((0, 0), (3, 3)).into_owned());
    let p2 = lapse_time_prob(2, &fl0, &a).unwrap();
    assert!((p2 - (0.8 - both)).abs() < 1e-10);
    assert!((lapse_time_prob(3, &fl0, &a).unwrap() - both).abs() < 1e-10);
}

#[test]
fn conditional_densities_integrate_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let m = 3;
    for (s, t) in [(2, 4), (1, 2), (3, 3)] {
        let a = random_params(&mut rng, m, true);
        let tw = [
            TweedieParams::new(1.5, 1.0, 1.5).unwrap(),
            TweedieParams::new(0.8, 2.0, 1.6).unwrap(),
        ];
        let fl0 = [0.85, 0.8, 0.9];
        let mass = conditional_mass(tw, Cell { j: 0, k: 1, s, t }, &fl0, &a);
        assert!((mass - 1.0).abs() < 1e-3, "s={s} t={t}: {mass}");
    }
}

#[test]
fn unlinked_lapse_leaves_cross_sectional_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for case in 0..100 {
        let m = rng.random_range(1..=3);
        // outcome streams independent over time keep the same-period
        // correlation at rho_12; the lapse stream stays autocorrelated
        let mut a = random_params(&mut rng, m, false);
        a.rho_l = vec![0.0, 0.0];
        a.lapse = TemporalSpec::new(TemporalKind::Ar1, rng.random_range(-0.6..0.6), m).unwrap();
        let ids = a.all_params(true);
        let cell = random_cell(&mut rng, m);
        let (tj, tk) = random_pair(&mut rng);
        let fl0: Vec<f64> = (0..m).map(|_| rng.random_range(0.6..0.95)).collect();
        let Some((dens, score)) = eval(&tj, &tk, cell, &fl0, &a, &ids, EvalPath::General) else {
            continue;
        };
        let rho = a.rho_cross[0];
        assert!(rel_err(dens, pair_density(&tj, &tk, rho).unwrap(), 1e-12) < 1e-6, "case {case}");
        let q = ids.iter().position(|id| *id == ParamId::RhoCross(0, 1)).unwrap();
        let cross = pair_score(&tj, &tk, rho).unwrap();
        assert!((score[q] - cross).abs() < 1e-6 * (1.0 + cross.abs()), "case {case}: {} vs {cross}", score[q]);
        if rho == 0.0 {
            let indep = [&tj, &tk].iter().map(|t| if t.is_discrete() { t.cdf - t.cdf_left } else { t.density }).product::<f64>();
            assert!(rel_err(dens, indep, 1e-12) < 1e-9);
        }
    }
}

#[test]
fn all_zero_associations_give_product_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..50 {
        let m = rng.random_range(1..=4);
        let a = AssociationParams::independent_time(vec![0.0, 0.0], vec![0.0], m).unwrap();
        let cell = random_cell(&mut rng, m);
        let (tj, tk) = random_pair(&mut rng);
        let fl0: Vec<f64> = (0..m).map(|_| rng.random_range(0.6..0.95)).collect();
        let mass = |t: &Triplet| if t.is_discrete() { t.cdf - t.cdf_left } else { t.density };
        for path in [EvalPath::Auto, EvalPath::General] {
            let (dens, _) = eval(&tj, &tk, cell, &fl0, &a, &[], path).unwrap();
            assert!(rel_err(dens, mass(&tj) * mass(&tk), 1e-300) < 1e-9);
        }
    }
}

mod study {
    use super::common::mean_and_se;
    use lapsecop_core::dropout::{fit_dropout_gmm, DropoutMoments, SubjectObs};
    use lapsecop_core::gmm::{moment_matrix, WeightMode};
    use lapsecop_core::simulation::{generate_panel, StudyConfig};

    #[test]
    fn dropout_scores_are_unbiased_at_truth() {
        let c = StudyConfig::table1(10_000, 2.0, 1, 1);
        let data = generate_panel(&c, 2024).unwrap();
        let (lapse, outcomes) = c.marginal_models().unwrap();
        let obs = SubjectObs::from_panel(&data, &lapse, &outcomes).unwrap();
        let truth = c.association().unwrap();
        let ids = c.estimated_params().unwrap();
        let model = DropoutMoments::new(&obs, truth.clone(), ids.clone()).unwrap();
        let g = moment_matrix(&model, &truth.values(&ids)).unwrap();
        let rows: Vec<Vec<f64>> = g.row_iter().map(|r| r.iter().cloned().collect()).collect();
        let (mean, se) = mean_and_se(&rows);
        for (k, (m, s)) in mean.iter().zip(&se).enumerate() {
            assert!(m.abs() <= 3.0 * s, "moment {k}: {m} (se {s})");
        }
    }

    #[test]
    fn null_association_is_recovered() {
        let mut c = StudyConfig::table1(600, 2.0, 1, 1);
        c.rho = [0.0, 0.0, 0.0];
        let data = generate_panel(&c, 5).unwrap();
        let (lapse, outcomes) = c.marginal_models().unwrap();
        let obs = SubjectObs::from_panel(&data, &lapse, &outcomes).unwrap();
        let ids = c.estimated_params().unwrap();
        let fit = fit_dropout_gmm(&obs, &c.association().unwrap(), &ids, WeightMode::OneStep).unwrap();
        assert!(fit.gmm.converged);
        for a in 0..ids.len() {
            assert!(fit.gmm.theta[a].abs() < 3.0 * fit.gmm.std_errors[a], "{a}: {:?}", fit.gmm);
        }
    }
}
