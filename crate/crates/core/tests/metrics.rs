mod common;

use common::oracles::{self, random_f1_instance};
use dplora::metrics::*;
use dplora::rng::rng_for;
use dplora::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matches_definition_oracle_on_random_instances() {
    for case in 0..1000 {
        let mut rng = rng_for(7, "metrics-oracle", case);
        let (p, t) = random_f1_instance(&mut rng);
        let got = weighted_f1(&confusion(&p, &t).unwrap()).weighted_f1;
        let want = oracles::weighted_f1(&p, &t);
        assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn hand_case_is_exact() {
    // class 0: F1 1.0 with support 3; class 1: F1 0.0 with support 1
    let targets = vec![vec![1, 0], vec![1, 0], vec![1, 0], vec![0, 1]];
    let preds = vec![vec![1, 0], vec![1, 0], vec![1, 0], vec![0, 0]];
    let r = weighted_f1(&confusion(&preds, &targets).unwrap());
    assert_eq!(r.per_class[0].f1, 1.0);
    assert_eq!(r.per_class[1].f1, 0.0);
    assert_eq!((r.per_class[0].support, r.per_class[1].support), (3, 1));
    assert_eq!(r.weighted_f1, 0.75);
    assert!(!r.degenerate);
}

#[test]
fn conventions() {
    let t = vec![vec![1, 1], vec![0, 1]];
    assert_eq!(weighted_f1(&confusion(&t, &t).unwrap()).weighted_f1, 1.0);
    let zeros = vec![vec![0, 0], vec![0, 0]];
    let r = weighted_f1(&confusion(&t, &zeros).unwrap());
    assert_eq!(r.weighted_f1, 0.0);
    assert!(r.degenerate);
    assert!(confusion(&t, &t[..1]).is_err());
    assert!(confusion(&[vec![2, 0]], &[vec![1, 0]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn equal_supports_give_macro_f1(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "macro", 0);
        let (n, l, k) = (12, 4, rng.random_range(1..12));
        // every class has exactly k positives
        let targets: Vec<Vec<u8>> = (0..n)
            .map(|i| (0..l).map(|c| u8::from((i + c * 3) % n < k)).collect())
            .collect();
        let preds: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..l).map(|_| rng.random_range(0..2)).collect())
            .collect();
        let r = weighted_f1(&confusion(&preds, &targets).unwrap());
        let macro_f1 = r.per_class.iter().map(|c| c.f1).sum::<f64>() / l as f64;
        prop_assert!((r.weighted_f1 - macro_f1).abs() < 1e-12);
    }

    #[test]
    fn single_supported_class_gives_its_f1(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "single", 0);
        let (p, mut t) = random_f1_instance(&mut rng);
        t.iter_mut().for_each(|row| row.iter_mut().skip(1).for_each(|x| *x = 0));
        t[0][0] = 1;
        let r = weighted_f1(&confusion(&p, &t).unwrap());
        prop_assert!((r.weighted_f1 - r.per_class[0].f1).abs() < 1e-12);
    }

    #[test]
    fn label_permutation_invariance(seed in any::<u64>()) {
        let mut rng = rng_for(seed, "perm", 0);
        let (p, t) = random_f1_instance(&mut rng);
        let l = t[0].len();
        let mut perm: Vec<usize> = (0..l).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permute = |m: &[Vec<u8>]| -> Vec<Vec<u8>> {
            m.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect()
        };
        let a = weighted_f1(&confusion(&p, &t).unwrap()).weighted_f1;
        let b = weighted_f1(&confusion(&permute(&p), &permute(&t)).unwrap()).weighted_f1;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn raising_threshold_never_adds_positives(seed in any::<u64>(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let mut rng = rng_for(seed, "thr", 0);
        let (n, l) = (rng.random_range(1..20), rng.random_range(1..6));
        let probs: Vec<f64> = (0..n * l).map(|_| rng.random()).collect();
        let probs = Tensor::new(vec![n, l], probs).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = threshold(&probs, lo).unwrap();
        let b = threshold(&probs, hi).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (&x, &y) in ra.iter().zip(rb) {
                prop_assert!(y <= x);
            }
        }
    }
}

#[test]
fn threshold_boundaries() {
    let probs = Tensor::new(vec![1, 4], vec![0.0, 0.5, 0.7, 1.0]).unwrap();
    assert_eq!(threshold(&probs, 0.5).unwrap(), vec![vec![0, 1, 1, 1]]);
    assert_eq!(threshold(&probs, 0.0).unwrap(), vec![vec![1, 1, 1, 1]]);
    assert_eq!(threshold(&probs, 1.0).unwrap(), vec![vec![0, 0, 0, 1]]);
    assert!(threshold(&probs, 1.5).is_err());
    assert!(threshold(&probs, -0.1).is_err());
}
