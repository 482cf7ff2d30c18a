use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsr_core::evaluation::{eer, feature_l2, psnr_luma, unit_l2};
use wsr_core::perceptual::{total_loss, FeatureNetwork, LossWeights, Tap};
use wsr_core::{Tape, Tensor};

/// Rates recounted from scratch at every candidate threshold, accepting
/// when score ≥ threshold.
fn brute_force_eer(pairs: &[(f64, bool)]) -> f64 {
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let pos = pairs.iter().filter(|p| p.1).count() as f64;
    let neg = pairs.len() as f64 - pos;
    let rates = |th: f64| {
        let fp = pairs.iter().filter(|p| !p.1 && p.0 >= th).count() as f64;
        let fn_ = pairs.iter().filter(|p| p.1 && p.0 < th).count() as f64;
        (fp / neg, fn_ / pos)
    };
    let mut best = f64::INFINITY;
    for &th in &thresholds {
        let (fpr, fnr) = rates(th);
        if fpr == fnr {
            best = best.min(fpr);
        }
    }
    if best.is_finite() {
        return best;
    }
    for w in thresholds.windows(2) {
        let ((f0, n0), (f1, n1)) = (rates(w[0]), rates(w[1]));
        if f0 > n0 && f1 < n1 {
            // Intersection of the two straight segments.
            let t = (f0 - n0) / ((f0 - n0) - (f1 - n1));
            return f0 + t * (f1 - f0);
        }
    }
    unreachable!("FPR falls from 1 to 0 while FNR rises from 0 to 1")
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<(f64, bool)> {
    let mut pairs: Vec<(f64, bool)> = (0..n).map(|_| (f64::from(rng.random_range(0..levels)), rng.random_bool(0.4))).collect();
    pairs[0].1 = true;
    pairs[1].1 = false;
    pairs
}

#[test]
fn eer_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let n = rng.random_range(2..=200);
        // Few levels force ties; many levels make them rare.
        let levels = if case % 2 == 0 { 8 } else { 1 << 20 };
        let pairs = random_pairs(&mut rng, n, levels);
        assert_eq!(eer(&pairs).unwrap(), brute_force_eer(&pairs), "case {case}");
    }
}

#[test]
fn hand_built_pairs_meet_at_one_third() {
    let pairs = [(0.9, true), (0.8, true), (0.4, true), (0.7, false), (0.3, false), (0.2, false)];
    assert_eq!(eer(&pairs).unwrap(), 1.0 / 3.0);
    let separable = [(0.9, true), (0.1, false)];
    assert_eq!(eer(&separable).unwrap(), 0.0);
    let inverted = [(0.1, true), (0.9, false)];
    assert_eq!(eer(&inverted).unwrap(), 1.0);
}

#[test]
fn eer_rejects_one_sided_or_non_finite_sets() {
    assert!(eer(&[(0.5, true), (0.2, true)]).is_err());
    assert!(eer(&[(f64::NAN, true), (0.2, false)]).is_err());
}

proptest! {
    #[test]
    fn eer_depends_only_on_score_order(seed in any::<u64>(), n in 2usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut rng, n, 30);
        // Integer cubes stay exact and strictly increasing.
        let moved: Vec<(f64, bool)> = pairs.iter().map(|&(s, l)| (s * s * s + 3.0 * s - 7.0, l)).collect();
        let e = eer(&pairs).unwrap();
        prop_assert_eq!(e, eer(&moved).unwrap());
        prop_assert!((0.0..=1.0).contains(&e));
    }
}

fn flat(v: f64) -> Tensor<f64> {
    Tensor::full(&[3, 8, 8], v)
}

#[test]
fn psnr_matches_closed_forms() {
    // Equal 0.1 offset in every channel: luma MSE 0.01.
    assert!((psnr_luma(&flat(0.5), &flat(0.6)).unwrap() - 20.0).abs() < 1e-6);
    let mut red = flat(0.5);
    for v in &mut red.data_mut()[..64] {
        *v += 0.1;
    }
    let expected = -20.0 * (0.299f64 * 0.1).log10();
    assert!((expected - 30.487).abs() < 1e-3);
    assert!((psnr_luma(&flat(0.5), &red).unwrap() - expected).abs() < 1e-6);
    assert_eq!(psnr_luma(&red, &red).unwrap(), 99.0);
}

#[test]
fn psnr_is_symmetric_and_falls_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clean = Tensor::<f64>::from_fn(&[3, 16, 16], |_| rng.random_range(0.2..0.8));
    let pattern: Vec<f64> = (0..clean.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.05, 0.1] {
        let noisy = Tensor::from_fn(&[3, 16, 16], |i| clean.data()[i] + amp * pattern[i]);
        let p = psnr_luma(&clean, &noisy).unwrap();
        assert_eq!(p, psnr_luma(&noisy, &clean).unwrap());
        assert!(p < last);
        last = p;
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(0.0..1.0))
}

#[test]
fn feature_distances_form_a_bounded_metric() {
    let net = FeatureNetwork::seeded(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (a, b, c) = (random_image(&mut rng), random_image(&mut rng), random_image(&mut rng));
        for tap in [Tap::Pool3, Tap::Pool4, Tap::Fc7] {
            let ab = feature_l2(&a, &b, &net, tap).unwrap();
            let bc = feature_l2(&b, &c, &net, tap).unwrap();
            let ac = feature_l2(&a, &c, &net, tap).unwrap();
            assert!((0.0..=2.0).contains(&ab));
            assert!(ac <= ab + bc + 1e-9, "{tap:?}: {ac} > {ab} + {bc}");
            assert_eq!(feature_l2(&a, &a, &net, tap).unwrap(), 0.0);
        }
    }
}

#[test]
fn opposite_unit_vectors_are_two_apart() {
    assert!((unit_l2(&[3.0, 4.0], &[-6.0, -8.0]) - 2.0).abs() < 1e-12);
    assert!((unit_l2(&[1.0, 0.0], &[0.0, 2.0]) - 2f64.sqrt()).abs() < 1e-12);
}

fn loss_value(net: &FeatureNetwork<f64>, weights: &LossWeights, pred: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant_ref(pred);
    let t = tape.constant_ref(target);
    let l = total_loss(&mut tape, p, t, net, weights).unwrap();
    tape.value(l).data()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn perceptual_terms_only_add_and_grow_with_their_weight(seed in any::<u64>()) {
        let net = FeatureNetwork::<f32>::seeded(1).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
        let pixel = loss_value(&net, &LossWeights::pixel_only(), &pred, &target);
        let mut last = pixel;
        for lambda in [0.5, 1.0, 4.0] {
            let mut w = LossWeights::pixel_only();
            w.set(Tap::Pool3, lambda);
            w.set(Tap::Fc7, lambda);
            let l = loss_value(&net, &w, &pred, &target);
            prop_assert!(l >= last);
            last = l;
        }
        prop_assert!(last > pixel);
    }
}
