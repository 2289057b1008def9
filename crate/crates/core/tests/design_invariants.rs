use bpsa::design::*;
use bpsa::ps_model::{AlphaDraw, PsDraw, PsModel, PsModelSpec};
use bpsa::data::{generate, DgpConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores_and_arms() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (20usize..300).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(prop::bool::weighted(0.4), n),
        )
    })
    .prop_map(|(l, mut t)| {
        t[0] = true;
        let last = t.len() - 1;
        t[last] = false;
        (l, t)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quintile_partition_sizes((l, t) in scores_and_arms()) {
        let n = l.len();
        // distinct scores: strata sizes are n/5 up to rounding
        let mut lin = l.clone();
        for (i, v) in lin.iter_mut().enumerate() {
            *v += i as f64 * 1e-9;
        }
        let d = stratify(&PsDraw::from_linear(lin), &t, 5).unwrap();
        let labels = d.labels().unwrap();
        let mut sizes = [0usize; 5];
        for &s in labels {
            prop_assert!((1..=5).contains(&s));
            sizes[s as usize - 1] += 1;
        }
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for s in sizes {
            prop_assert!((s as f64 - n as f64 / 5.0).abs() <= 1.0, "{:?}", sizes);
        }
    }

    #[test]
    fn frequency_weight_arm_sums((l, t) in scores_and_arms(), ratio in 1usize..5, cal in 0.05..2.0f64, seed in 0u64..1000) {
        let p = PsDraw::from_linear(l);
        for (kind, d) in [
            ("nn", nn_match(&p, &t, &ImplementationSpec::nn(ratio, cal))),
            ("caliper", caliper_match_seeded(&p, &t, &ImplementationSpec::caliper(ratio, cal, 1), seed)),
        ] {
            let Ok(d) = d else { continue };
            let w = d.weights().unwrap();
            let treated: f64 = t.iter().zip(w).filter(|(&a, _)| a).map(|(_, &v)| v).sum();
            let control: f64 = t.iter().zip(w).filter(|(&a, _)| !a).map(|(_, &v)| v).sum();
            prop_assert_eq!(treated, d.included.treated as f64, "{}", kind);
            prop_assert!((control - d.included.control as f64).abs() < 1e-9, "{}", kind);
            prop_assert_eq!(d.included.treated + d.pruned_treated, t.iter().filter(|&&a| a).count());
            prop_assert!(t.iter().zip(w).filter(|(&a, _)| a).all(|(_, &v)| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn caliper_respected_on_every_pair((l, t) in scores_and_arms(), ratio in 1usize..4, cal in 0.05..1.0f64, seed in 0u64..1000) {
        let p = PsDraw::from_linear(l);
        let nn_spec = ImplementationSpec::nn(ratio, cal);
        let cal_spec = ImplementationSpec::caliper(ratio, cal, 1);
        let coord = match_coordinate(&p, nn_spec.caliper_scale);
        let width = caliper_width(&p, &nn_spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nn = nn_match_sets(&p, &t, &nn_spec).unwrap();
        let cm = caliper_match_sets(&p, &t, &cal_spec, &mut rng).unwrap();
        for sets in [&nn, &cm] {
            for (i, m) in sets.iter() {
                prop_assert!(t[*i]);
                let in_caliper = (0..t.len()).filter(|&j| !t[j] && (coord[j] - coord[*i]).abs() <= width).count();
                match m {
                    Some(cs) => {
                        prop_assert_eq!(cs.len(), ratio);
                        let mut sorted = cs.clone();
                        sorted.sort();
                        sorted.dedup();
                        prop_assert_eq!(sorted.len(), ratio);
                        for &c in cs {
                            prop_assert!(!t[c]);
                            prop_assert!((coord[c] - coord[*i]).abs() <= width);
                        }
                    }
                    None => prop_assert!(in_caliper < ratio),
                }
            }
        }
        // NN picks are the closest in-caliper controls
        for (i, m) in &nn {
            if let Some(cs) = m {
                let worst = cs.iter().map(|&c| (coord[c] - coord[*i]).abs()).fold(0.0, f64::max);
                let closer = (0..t.len()).filter(|&j| !t[j] && (coord[j] - coord[*i]).abs() < worst).count();
                prop_assert!(closer < ratio);
            }
        }
    }

    #[test]
    fn deterministic_implementations_are_bitwise_stable((l, t) in scores_and_arms()) {
        let p = PsDraw::from_linear(l);
        for spec in [
            ImplementationSpec::stratification(5),
            ImplementationSpec::nn(1, 0.5),
            ImplementationSpec::ipw(),
            ImplementationSpec::dr(),
        ] {
            let a = implement(&p, &t, &spec, 1);
            let b = implement(&p, &t, &spec, 2);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    match (&a.payload, &b.payload) {
                        (DesignPayload::Weights(x), DesignPayload::Weights(y)) => {
                            prop_assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
                        }
                        _ => prop_assert_eq!(&a.payload, &b.payload),
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "one run failed"),
            }
        }
    }
}

#[test]
fn equidistant_caliper_matches_split_evenly() {
    // treated at logit 0, two controls at ±1, wide caliper
    let p = PsDraw::from_linear(vec![0.0, -1.0, 1.0]);
    let t = [true, false, false];
    let spec = ImplementationSpec::caliper(1, 100.0, 1);
    let trials = 10_000;
    let left = (0..trials)
        .filter(|&s| caliper_match_seeded(&p, &t, &spec, s).unwrap().weights().unwrap()[1] > 0.0)
        .count();
    let share = left as f64 / trials as f64;
    assert!((share - 0.5).abs() <= 0.02, "{share}");
}

#[test]
fn draw_designs_is_independent_of_worker_count() {
    let data = generate(&DgpConfig {
        n: 300,
        seed: 4,
        ..DgpConfig::default()
    })
    .unwrap();
    let td = data.design_view();
    let spec = PsModelSpec::by_prefixes(td, &["c", "i"]);
    let model = PsModel::new(td, &spec).unwrap();
    let post = model.sample_posterior(30, 2, &Default::default()).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| draw_designs_with(&post.draws, &model, td.treatment(), &ImplementationSpec::caliper(2, 0.5, 3), 8))
            .unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    assert_eq!(a.len(), 90);
    assert_eq!(a[4].provenance, Provenance { k: 1, r: 1 });
    // identical α draws through a deterministic kind give identical designs
    let same = vec![AlphaDraw(post.draws[0].0.clone()); 5];
    let d = draw_designs_with(&same, &model, td.treatment(), &ImplementationSpec::nn(1, 0.5), 0).unwrap();
    assert!(d.windows(2).all(|w| w[0].payload == w[1].payload));
}
