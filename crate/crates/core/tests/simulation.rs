use lapsecop_core::copula::{normal_score, CorrMatrix};
use lapsecop_core::marginal::{Family, MarginalModel};
use lapsecop_core::simulation::{draw_outcomes, generate_panel, run_study, StudyConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Probabilists' Gauss-Hermite rule by the Golub-Welsch eigenproblem,
/// normalized so the weights sum to one.
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let j = DMatrix::from_fn(n, n, |a, b| if a.abs_diff(b) == 1 { (a.max(b) as f64).sqrt() } else { 0.0 });
    let eig = j.symmetric_eigen();
    (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect()
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Expected per-row averages of the lapse indicator and of the zero-claim
/// indicator of outcome 1 under independent-in-time lapse: each period's
/// contribution is weighted by the probability of still being observed.
fn row_averages(c: &StudyConfig) -> (f64, f64) {
    let gh = gauss_hermite(16);
    let (bl, b1) = (&c.beta_l, &c.beta_1);
    let (mut rows, mut lapses, mut zeros) = (0.0, 0.0, 0.0);
    for x1 in [0.0, 1.0] {
        for &(a, wa) in &gh {
            for &(b, wb) in &gh {
                for &(d, wd) in &gh {
                    let w = 0.5 * wa * wb * wd;
                    let mut surv = 1.0;
                    for t in 1..=c.m {
                        let x = [x1, a, b, d, t as f64];
                        let lin = |beta: &[f64]| beta[0] + x.iter().zip(&beta[1..]).map(|(u, v)| u * v).sum::<f64>();
                        let pi = logistic(lin(bl));
                        let mu = lin(b1).exp();
                        let pzero = (-mu.powf(2.0 - c.power) / (c.phi1 * (2.0 - c.power))).exp();
                        rows += w * surv;
                        lapses += w * surv * pi;
                        zeros += w * surv * pzero;
                        surv *= 1.0 - pi;
                    }
                }
            }
        }
    }
    (lapses / rows, zeros / rows)
}

#[test]
fn panels_are_deterministic_and_ragged() {
    let c = StudyConfig::table1(300, 2.0, 1, 1);
    let a = generate_panel(&c, 42).unwrap();
    let b = generate_panel(&c, 42).unwrap();
    assert_eq!(a, b);
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    a.write_csv(&mut wa).unwrap();
    b.write_csv(&mut wb).unwrap();
    assert_eq!(wa, wb);
    assert_ne!(a, generate_panel(&c, 43).unwrap());
    a.validate().unwrap();
    assert_eq!(a.n(), 300);
    for s in &a.subjects {
        let t = s.lapse_time(c.m);
        assert_eq!(s.n_obs(), t.min(c.m));
        assert!(s.lapse[..s.n_obs() - 1].iter().all(|&l| l == 0));
        for (t, x) in s.x.iter().enumerate() {
            assert_eq!(x[4], (t + 1) as f64);
            assert_eq!(x[..4], s.x[0][..4]);
        }
    }
}

#[test]
fn lapse_and_zero_rates_match_design_averages() {
    let c = StudyConfig::table1(20_000, 42.0, 1, 1);
    let data = generate_panel(&c, 7).unwrap();
    let rows = data.n_rows() as f64;
    let lapse = data.subjects.iter().flat_map(|s| &s.lapse).filter(|&&l| l == 1).count() as f64 / rows;
    let zero = data.subjects.iter().flat_map(|s| &s.y).filter(|y| y[0] == 0.0).count() as f64 / rows;
    let (want_lapse, want_zero) = row_averages(&c);
    // rows cluster within subjects; 5 binomial SEs leave room for that
    let tol = |p: f64| 5.0 * (p * (1.0 - p) / rows).sqrt();
    assert!((lapse - want_lapse).abs() < tol(want_lapse), "lapse {lapse} vs {want_lapse}");
    assert!((zero - want_zero).abs() < tol(want_zero), "zero {zero} vs {want_zero}");
    assert!((want_lapse - 0.25).abs() < 0.01);
    assert!((want_zero - 0.85).abs() < 0.03);
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn zero_association_gives_uncorrelated_streams() {
    let mut c = StudyConfig::table1(5000, 2.0, 1, 1);
    c.rho = [0.0, 0.0, 0.0];
    let data = generate_panel(&c, 11).unwrap();
    let (lapse, outcomes) = c.marginal_models().unwrap();
    let models = [&lapse, &outcomes[0], &outcomes[1]];
    // mid-point normal scores of the hybrid observations
    let mut scores: [Vec<f64>; 3] = Default::default();
    for s in &data.subjects {
        for t in 0..s.n_obs() {
            let vals = [s.lapse[t] as f64, s.y[t][0], s.y[t][1]];
            for (k, model) in models.iter().enumerate() {
                let tr = model.triplet(&s.x[t], vals[k]).unwrap();
                let u = if tr.is_discrete() { 0.5 * (tr.cdf + tr.cdf_left) } else { tr.cdf };
                scores[k].push(normal_score(u));
            }
        }
    }
    let bound = 4.0 / (scores[0].len() as f64).sqrt();
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let r = correlation(&scores[a], &scores[b]);
        assert!(r.abs() < bound, "({a}, {b}): {r}");
    }
}

#[test]
fn drawn_outcomes_follow_the_margins() {
    let cols = vec!["x".to_string()];
    let m = MarginalModel::from_coefficients(Family::LogitBernoulli, &cols, vec![-1.0, 0.0], 1.0, 0.0, &cols).unwrap();
    let rows = vec![vec![0.0]; 20_000];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = draw_outcomes(&mut rng, &rows, &[m.clone(), m], &CorrMatrix::identity(2)).unwrap();
    let rate = y.iter().map(|r| r[0]).sum::<f64>() / y.len() as f64;
    let pi = logistic(-1.0);
    assert!((rate - pi).abs() < 4.0 * (pi * (1.0 - pi) / 20_000.0).sqrt());
}

#[test]
fn single_replicate_report() {
    let c = StudyConfig::table1(200, 2.0, 1, 5);
    let r = run_study(&c).unwrap();
    assert!(r.se.is_none());
    let est = r.estimates[0].as_ref().unwrap();
    for a in 0..3 {
        assert_eq!(r.bias[a], est[a] - r.truth[a]);
    }
    assert!(r.warnings.iter().any(|w| w.contains("replicate")));
    assert!(r.warnings.iter().any(|w| w.contains("250")));
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(r.to_text().contains("rho_12"));
}

#[test]
fn studies_repeat_across_thread_counts() {
    let c = StudyConfig::table1(120, 2.0, 3, 9);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_study(&c).unwrap())
    };
    let one = run(1);
    assert_eq!(one.converged + one.failures.len(), 3);
    assert_eq!(one, run(3));
}

#[test]
fn simulated_panels_round_trip_through_csv() {
    let c = StudyConfig::table1(200, 42.0, 1, 1);
    let data = generate_panel(&c, 99).unwrap();
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let back = lapsecop_core::panel::PanelDataset::read_csv(buf.as_slice(), Some(c.m)).unwrap();
    assert_eq!(data, back);
}
