use demorph_core::checkpoint::Container;
use demorph_core::config::TrainConfig;
use demorph_core::dmad::{calibrate_threshold, classify, Decision};
use demorph_core::metrics::*;
use demorph_core::tensor::Tensor;
use demorph_core::training::curriculum_probability;
use demorph_core::types::RestorationScenario;
use proptest::prelude::*;

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-1.0f64..1.0, (-10i32..=10).prop_map(|k| k as f64 / 10.0)], 1..max)
}

/// Smallest candidate threshold meeting the target, found by sweeping.
fn calibrate_oracle(mated: &[f64], non: &[f64], target: f64) -> f64 {
    let mut cands: Vec<f64> = mated.iter().chain(non).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let top = *cands.last().unwrap();
    cands.push(top.next_up());
    cands
        .into_iter()
        .find(|&t| non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64 <= target)
        .unwrap()
}

#[test]
fn curriculum_hits_its_anchor_points() {
    let cfg = TrainConfig::toy();
    let cap = cfg.curriculum_cap_step;
    assert_eq!(curriculum_probability(0, &cfg), 0.0);
    assert!((curriculum_probability(cap / 2, &cfg) - 0.4).abs() < 1e-12);
    for step in [cap, cap + 1, 10 * cap] {
        assert!((curriculum_probability(step, &cfg) - 0.8).abs() < 1e-12);
    }
}

#[test]
fn classify_is_inclusive_at_tau() {
    for tau in [-1.0, -0.3, 0.0, 0.651, 1.0] {
        assert_eq!(classify(tau, tau), Decision::BonaFide);
        assert_eq!(classify(tau - 1e-9, tau), Decision::Morphed);
        assert_eq!(classify(tau.next_down(), tau), Decision::Morphed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn calibration_is_the_sweep_minimum(mated in scores(60), non in scores(60), target in 0.001f64..0.999) {
        let th = calibrate_threshold(&mated, &non, target, "frs").unwrap();
        prop_assert_eq!(th.tau, calibrate_oracle(&mated, &non, target));
        prop_assert!(th.achieved_fmr <= target);
        prop_assert_eq!(th.mated_n, mated.len());
    }

    #[test]
    fn calibration_ignores_order_and_duplication(mated in scores(40), non in scores(40), target in 0.001f64..0.999) {
        let base = calibrate_threshold(&mated, &non, target, "frs").unwrap().tau;
        let mut m2 = mated.clone();
        let mut n2 = non.clone();
        m2.reverse();
        n2.rotate_left(non.len() / 2);
        prop_assert_eq!(calibrate_threshold(&m2, &n2, target, "frs").unwrap().tau, base);
        let dup = |xs: &[f64]| xs.iter().chain(xs).copied().collect::<Vec<_>>();
        prop_assert_eq!(calibrate_threshold(&dup(&mated), &dup(&non), target, "frs").unwrap().tau, base);
    }

    #[test]
    fn classify_is_a_threshold(s in -1.0f64..1.0, tau in -1.0f64..1.0) {
        prop_assert_eq!(classify(s, tau) == Decision::BonaFide, s >= tau);
    }

    #[test]
    fn error_rates_are_monotone(bona in scores(50), morph in scores(50), t0 in -1.1f64..1.1, t1 in -1.1f64..1.1) {
        let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        prop_assert!(macer(&morph, lo).unwrap() >= macer(&morph, hi).unwrap());
        prop_assert!(bscer(&bona, lo).unwrap() <= bscer(&bona, hi).unwrap());
        let e = eer(&bona, &morph).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let det = det_curve(&bona, &morph).unwrap();
        prop_assert!(det.windows(2).all(|w| w[0].macer >= w[1].macer && w[0].bscer <= w[1].bscer));
        prop_assert_eq!((det[0].macer, det[0].bscer), (1.0, 0.0));
        prop_assert_eq!((det[det.len() - 1].macer, det[det.len() - 1].bscer), (0.0, 1.0));
    }

    #[test]
    fn bms_is_a_metric_on_samples(a in scores(50), b in scores(50), shift in -0.5f64..0.5) {
        let ab = bms(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - bms(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(bms(&a, &a).unwrap().abs() <= 1e-12);
        let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert!((bms(&moved, &a).unwrap() - shift.abs()).abs() <= 1e-9);
    }

    #[test]
    fn dti_and_dnti_are_shifted_means(xs in scores(80), tau in -1.0f64..1.0) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!((dti(&xs, tau).unwrap() - (mean - tau)).abs() <= 1e-12);
        prop_assert!((dnti(&xs, tau, RestorationScenario::Accomplice).unwrap() - (mean - tau)).abs() <= 1e-12);
    }

    #[test]
    fn container_round_trips(
        tensors in prop::collection::vec(prop::collection::vec(any::<f64>(), 0..20), 0..5),
        meta in prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,12}", 0..4),
    ) {
        let mut c = Container { meta, ..Container::default() };
        for (i, data) in tensors.into_iter().enumerate() {
            let n = data.len();
            c.push(format!("t{i}"), Tensor::new(vec![n], data));
        }
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        prop_assert_eq!(back.meta, c.meta);
        prop_assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn dnti_is_undefined_for_bona_fide() {
    assert!(dnti(&[0.5], 0.1, RestorationScenario::BonaFide).is_err());
}
