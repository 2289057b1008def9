//! Estimators against independent brute-force evaluations on hand datasets.

use bpsa::analysis::*;
use bpsa::data::{generate, Dataset, DgpConfig};
use bpsa::design::{ipw_weights, stratify};
use bpsa::ps_model::{PsDraw, PsModelSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ds(y: &[f64], t: &[bool], x: &[f64]) -> Dataset {
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    Dataset::from_rows(y.to_vec(), t.to_vec(), &rows, vec!["x".into()]).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn ipw_w(e: &[f64], t: &[bool]) -> Vec<f64> {
    e.iter().zip(t).map(|(&e, &t)| if t { 1.0 / e } else { 1.0 / (1.0 - e) }).collect()
}

/// Weighted least squares by normal equations on `[1, T]`.
fn wls_beta1(y: &[f64], t: &[bool], w: &[f64]) -> f64 {
    let n = y.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { t[i] as u8 as f64 });
    let wm = DMatrix::from_diagonal(&DVector::from_column_slice(w));
    let xtwx = x.transpose() * &wm * &x;
    let xtwy = x.transpose() * &wm * DVector::from_column_slice(y);
    xtwx.lu().solve(&xtwy).unwrap()[1]
}

/// Simple-regression fit `a + b·x` on a subset, by sums.
fn simple_fit(x: &[f64], y: &[f64], keep: impl Fn(usize) -> bool) -> (f64, f64) {
    let idx: Vec<usize> = (0..x.len()).filter(|&i| keep(i)).collect();
    let m = idx.len() as f64;
    let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
    let my = idx.iter().map(|&i| y[i]).sum::<f64>() / m;
    let sxy: f64 = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum();
    let sxx: f64 = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

// 6 units, one covariate, propensity scores given directly.
const Y6: [f64; 6] = [3.1, 0.4, 2.2, 1.7, 4.0, 0.9];
const T6: [bool; 6] = [true, false, true, false, true, false];
const X6: [f64; 6] = [0.5, -1.0, 0.1, 0.8, 1.3, -0.2];
const E6: [f64; 6] = [0.6, 0.3, 0.45, 0.55, 0.8, 0.25];

struct DrOracle {
    point: f64,
    dos: f64,
    influence: f64,
}

fn dr_oracle(y: &[f64], t: &[bool], x: &[f64], e: &[f64]) -> DrOracle {
    let n = y.len() as f64;
    let (a1, b1) = simple_fit(x, y, |i| t[i]);
    let (a0, b0) = simple_fit(x, y, |i| !t[i]);
    let m1: Vec<f64> = x.iter().map(|v| a1 + b1 * v).collect();
    let m0: Vec<f64> = x.iter().map(|v| a0 + b0 * v).collect();
    let tt: Vec<f64> = t.iter().map(|&b| b as u8 as f64).collect();
    let mu1 = (0..y.len()).map(|i| tt[i] * y[i] / e[i] - (tt[i] - e[i]) / e[i] * m1[i]).sum::<f64>() / n;
    let mu0 = (0..y.len())
        .map(|i| (1.0 - tt[i]) * y[i] / (1.0 - e[i]) + (tt[i] - e[i]) / (1.0 - e[i]) * m0[i])
        .sum::<f64>()
        / n;
    let s1: f64 = (0..y.len()).map(|i| tt[i] / e[i]).sum();
    let s0: f64 = (0..y.len()).map(|i| (1.0 - tt[i]) / (1.0 - e[i])).sum();
    let h1 = (0..y.len()).map(|i| tt[i] * y[i] / e[i]).sum::<f64>() / s1;
    let h0 = (0..y.len()).map(|i| (1.0 - tt[i]) * y[i] / (1.0 - e[i])).sum::<f64>() / s0;
    let first = (0..y.len())
        .map(|i| (tt[i] * (y[i] - h1) / e[i] - (1.0 - tt[i]) * (y[i] - h0) / (1.0 - e[i])).powi(2))
        .sum::<f64>()
        / n;
    let second = (0..y.len())
        .map(|i| {
            (((1.0 - e[i]) / e[i]).sqrt() * (m1[i] - mu1) + (e[i] / (1.0 - e[i])).sqrt() * (m0[i] - mu0)).powi(2)
        })
        .sum::<f64>()
        / n;
    let psi: Vec<f64> = (0..y.len())
        .map(|i| {
            tt[i] * y[i] / e[i] - (tt[i] - e[i]) / e[i] * m1[i] - (1.0 - tt[i]) * y[i] / (1.0 - e[i])
                - (tt[i] - e[i]) / (1.0 - e[i]) * m0[i]
        })
        .collect();
    let pm = psi.iter().sum::<f64>() / n;
    DrOracle {
        point: mu1 - mu0,
        dos: (first - second) / n,
        influence: psi.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / n / n,
    }
}

#[test]
fn dr_six_unit_hand_dataset() {
    let d = ds(&Y6, &T6, &X6);
    let w = ipw_w(&E6, &T6);
    let spec = PsModelSpec::new(["x"]);
    let o = dr_oracle(&Y6, &T6, &X6, &E6);
    let m = DrOutcomeModel::fit(&d, &spec).unwrap();
    assert!(rel(m.point(&d, &w).unwrap(), o.point) < 1e-10);
    assert!(rel(dr_point(&d, &w, &spec).unwrap(), o.point) < 1e-10);
    let v = m.projection_variance(&d, &w).unwrap();
    assert!(rel(v.raw, o.dos) < 1e-10, "{} vs {}", v.raw, o.dos);
    assert_eq!(v.floored, o.dos < DR_VARIANCE_FLOOR);
    assert!(rel(m.influence_variance(&d, &w).unwrap(), o.influence) < 1e-10);
}

#[test]
fn dr_random_small_datasets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(6..=10);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        // at least two units per arm for the arm regressions
        for i in 0..2 {
            t[i] = true;
            t[n - 1 - i] = false;
        }
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let d = ds(&y, &t, &x);
        let w = ipw_w(&e, &t);
        let o = dr_oracle(&y, &t, &x, &e);
        let m = DrOutcomeModel::fit(&d, &PsModelSpec::new(["x"])).unwrap();
        assert!((m.point(&d, &w).unwrap() - o.point).abs() <= 1e-10 * (1.0 + o.point.abs()));
        let v = m.projection_variance(&d, &w).unwrap();
        assert!((v.raw - o.dos).abs() <= 1e-10 * (1.0 + o.dos.abs()));
        assert!((m.influence_variance(&d, &w).unwrap() - o.influence).abs() <= 1e-10 * (1.0 + o.influence));
    }
}

#[test]
fn dr_negative_difference_is_floored_and_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut seen = 0;
    for _ in 0..500 {
        let n = 8;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + rng.random_range(-0.01..0.01)).collect();
        // extreme scores
        let e: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 0.02 } else { 0.98 }).collect();
        let d = ds(&y, &t, &x);
        let o = dr_oracle(&y, &t, &x, &e);
        if o.dos >= 0.0 {
            continue;
        }
        seen += 1;
        let v = dr_var(&d, &ipw_w(&e, &t), &PsModelSpec::new(["x"])).unwrap();
        assert!(v.floored);
        assert_eq!(v.value, DR_VARIANCE_FLOOR);
        assert!(v.raw < 0.0);
    }
    assert!(seen > 0, "no negative case constructed");
}

#[test]
fn dr_exact_outcome_model_recovers_effect_for_any_weights() {
    let x = [0.1, -0.5, 1.2, 0.7, -1.1, 0.3, 2.0, -0.4];
    let t = [true, false, true, false, true, false, true, false];
    let y: Vec<f64> = x.iter().zip(&t).map(|(&x, &t)| 1.0 + 1.5 * t as u8 as f64 + 0.8 * x).collect();
    let d = ds(&y, &t, &x);
    let spec = PsModelSpec::new(["x"]);
    for w in [vec![1.0; 8], vec![3.0, 1.2, 7.0, 1.9, 1.1, 4.0, 2.5, 1.05]] {
        assert!((dr_point(&d, &w, &spec).unwrap() - 1.5).abs() < 1e-12);
    }
    // constant outcome with an exact model: both terms vanish
    let d = d.with_outcome(vec![2.0; 8]).unwrap();
    let v = dr_var(&d, &ipw_w(&[0.3; 8], &t), &spec).unwrap();
    assert!(v.raw.abs() < 1e-24);
}

#[test]
fn dr_is_doubly_robust_with_empty_outcome_model() {
    let cfg = DgpConfig {
        n: 20_000,
        seed: 3,
        ..DgpConfig::default()
    };
    let d = generate(&cfg).unwrap();
    let alpha = cfg.true_alpha();
    let e: Vec<f64> = (0..d.n())
        .map(|i| {
            let lp: f64 = (0..d.p()).map(|j| alpha[j] * d.covariates()[(i, j)]).sum();
            1.0 / (1.0 + (-lp).exp())
        })
        .collect();
    let w = ipw_w(&e, d.treatment());
    let m = DrOutcomeModel::fit(&d, &PsModelSpec::new(Vec::<String>::new())).unwrap();
    let est = m.point(&d, &w).unwrap();
    let se = m.influence_variance(&d, &w).unwrap().sqrt();
    assert!((est - 1.5).abs() < 3.0 * se, "{est} ± {se}");
}

#[test]
fn ipw_four_unit_hand_values() {
    let y = [1.0, 2.0, 5.0, 7.0];
    let t = [true, true, false, false];
    let w = [2.0, 4.0, 4.0 / 3.0, 4.0 / 3.0];
    let d = ds(&y, &t, &[0.0, 1.0, 2.0, 3.0]);
    let m1 = (2.0 * 1.0 + 4.0 * 2.0) / 6.0;
    let m0 = 6.0;
    assert!(rel(ipw_point(&d, &w).unwrap(), m1 - m0) < 1e-14);
    // (1/n²)Σν[T(Y−μ₁)² + (1−T)(Y−μ₀)²]
    let v = (2.0 * (1.0 - m1).powi(2) + 4.0 * (2.0 - m1).powi(2) + 4.0 / 3.0 * 1.0 + 4.0 / 3.0 * 1.0) / 16.0;
    assert!(rel(ipw_var_trueps(&d, &w).unwrap(), v) < 1e-14);
}

#[test]
fn trueps_variance_halves_when_units_duplicate() {
    let y = [1.0, 2.0, 5.0, 7.0, 0.5];
    let t = [true, true, false, false, true];
    let x = [0.0, 1.0, 2.0, 3.0, 4.0];
    let w = [2.0, 4.0, 1.5, 1.25, 3.0];
    let a = ipw_var_trueps(&ds(&y, &t, &x), &w).unwrap();
    let dup = |v: &[f64]| v.iter().chain(v).copied().collect::<Vec<_>>();
    let t2: Vec<bool> = t.iter().chain(&t).copied().collect();
    let b = ipw_var_trueps(&ds(&dup(&y), &t2, &dup(&x)), &dup(&w)).unwrap();
    assert!(rel(b, a / 2.0) < 1e-12);
}

#[test]
fn sandwich_matches_two_sample_hc0() {
    let y = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0];
    let t = [true, false, true, false, true, false, true, false, true, false];
    let x = [0.0; 10];
    let d = ds(&y, &t, &x);
    for w in [vec![1.0; 10], vec![1.5, 2.0, 0.7, 1.1, 3.0, 0.4, 2.2, 1.0, 0.9, 1.3]] {
        let arm = |flag: bool| {
            let idx: Vec<usize> = (0..10).filter(|&i| t[i] == flag).collect();
            let sw: f64 = idx.iter().map(|&i| w[i]).sum();
            let mu = idx.iter().map(|&i| w[i] * y[i]).sum::<f64>() / sw;
            idx.iter().map(|&i| (w[i] * (y[i] - mu)).powi(2)).sum::<f64>() / (sw * sw)
        };
        let oracle = arm(true) + arm(false);
        assert!(rel(ipw_sandwich_var(&d, &w).unwrap(), oracle) < 1e-10);
        // model-based WLS variance: σ̂²(1/W₁ + 1/W₀), σ̂² = Σν r²/(m−2)
        let (w1, w0): (f64, f64) = (
            (0..10).filter(|&i| t[i]).map(|i| w[i]).sum(),
            (0..10).filter(|&i| !t[i]).map(|i| w[i]).sum(),
        );
        let (m1, m0) = hajek_means(&d, &w).unwrap();
        let rss: f64 = (0..10).map(|i| w[i] * (y[i] - if t[i] { m1 } else { m0 }).powi(2)).sum();
        let model = rss / 8.0 * (1.0 / w1 + 1.0 / w0);
        assert!(rel(wls_model_var(&d, &w).unwrap(), model) < 1e-10);
    }
}

#[test]
fn sandwich_is_usually_at_least_trueps_on_simulated_data() {
    let mut wins = 0;
    for seed in 0..100 {
        let d = generate(&DgpConfig {
            n: 300,
            seed,
            ..DgpConfig::default()
        })
        .unwrap();
        let cfg = DgpConfig::default();
        let alpha = cfg.true_alpha();
        let e: Vec<f64> = (0..d.n())
            .map(|i| {
                let lp: f64 = (0..d.p()).map(|j| alpha[j] * d.covariates()[(i, j)]).sum();
                1.0 / (1.0 + (-lp).exp())
            })
            .collect();
        let w = ipw_w(&e, d.treatment());
        wins += (ipw_sandwich_var(&d, &w).unwrap() >= ipw_var_trueps(&d, &w).unwrap()) as usize;
    }
    assert!(wins >= 90, "{wins}/100");
}

#[test]
fn stratified_contrast_equals_weighted_strata_means() {
    let n = 20;
    let t: Vec<bool> = (0..n).map(|i| (i * 7) % 3 != 0).collect();
    let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 * 0.3 + 0.9 * t[i] as u8 as f64 + x[i]).collect();
    let d = ds(&y, &t, &x);
    let ps = PsDraw::from_scores(x.iter().map(|v| 0.1 + 0.8 * v).collect()).unwrap();
    let design = stratify(&ps, &t, 3).unwrap();
    let labels = design.labels().unwrap();
    let post = StratOutcomePosterior::fit(&d, labels, 3, StrataContrast::ArmSpecific).unwrap();
    let mut oracle = 0.0;
    for (arm, sign) in [(true, 1.0), (false, -1.0)] {
        let n_arm = t.iter().filter(|&&v| v == arm).count() as f64;
        for s in 1..=3 {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == s && t[i] == arm).collect();
            let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
            oracle += sign * idx.len() as f64 / n_arm * m;
        }
    }
    assert!((post.point() - oracle).abs() < 1e-8);
    assert!((post.p_st.column(0).sum() - 1.0).abs() < 1e-12);
    assert!((post.p_st.column(1).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn stratified_posterior_centres_on_ols() {
    let d = generate(&DgpConfig {
        n: 400,
        seed: 8,
        ..DgpConfig::default()
    })
    .unwrap();
    let e: Vec<f64> = (0..d.n()).map(|i| 1.0 / (1.0 + (-d.covariates()[(i, 0)]).exp())).collect();
    let design = stratify(&PsDraw::from_scores(e).unwrap(), d.treatment(), 5).unwrap();
    let post = StratOutcomePosterior::fit(&d, design.labels().unwrap(), 5, StrataContrast::Pooled).unwrap();
    let s = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<_> = (0..s).map(|_| post.draw(&mut rng).0).collect();
    for j in 0..post.beta.len() {
        let col: Vec<f64> = draws.iter().map(|b| b[j]).collect();
        let m = col.iter().sum::<f64>() / s as f64;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s - 1) as f64).sqrt();
        assert!((m - post.beta[j]).abs() < 3.0 * sd / (s as f64).sqrt(), "coef {j}");
    }
    let est = strat_conditional(&d, &design, 400, 5, StrataContrast::Pooled).unwrap();
    let dr = est.draws.as_ref().unwrap();
    let m = dr.iter().sum::<f64>() / dr.len() as f64;
    assert_eq!(m, est.delta);
    assert!((est.delta - post.point()).abs() < 4.0 * post.ols_variance().sqrt() / 20.0);
}

#[test]
fn matching_and_ipw_share_the_weighted_code_path() {
    // the same weights give the same answer whichever design kind produced them
    let e = [0.6, 0.3, 0.45, 0.55, 0.8, 0.25];
    let design = ipw_weights(&PsDraw::from_scores(e.to_vec()).unwrap(), &T6).unwrap();
    let d = ds(&Y6, &T6, &X6);
    let w = design.weights().unwrap();
    assert!(rel(ipw_point(&d, w).unwrap(), wls_effect(&d, w).unwrap()) < 1e-12);
    assert!(rel(ipw_point(&d, w).unwrap(), wls_beta1(&Y6, &T6, w)) < 1e-10);
}

proptest! {
    #[test]
    fn ipw_point_equals_wls_coefficient(
        rows in prop::collection::vec((-5.0..5.0f64, 0.05..20.0f64), 4..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let n = rows.len();
        let mut t: Vec<bool> = flips[..n].to_vec();
        t[0] = true;
        t[1] = false;
        let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let d = ds(&y, &t, &vec![0.0; n]);
        let a = ipw_point(&d, &w).unwrap();
        let b = wls_beta1(&y, &t, &w);
        prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        prop_assert!((wls_effect(&d, &w).unwrap() - b).abs() <= 1e-10 * b.abs().max(1.0));
    }

    #[test]
    fn ipw_point_is_scale_invariant(c in 0.01..100.0f64) {
        let d = ds(&Y6, &T6, &X6);
        let w = ipw_w(&E6, &T6);
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        prop_assert!((ipw_point(&d, &w).unwrap() - ipw_point(&d, &scaled).unwrap()).abs() < 1e-12);
    }
}
