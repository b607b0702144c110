use panoda::autograd::IGNORE_LABEL;
use panoda::eval::ConfusionMatrix;
use panoda::scene::NUM_CLASSES;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: u8 = NUM_CLASSES as u8;

fn pairs(max: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(0..K, n),
            prop::collection::vec(prop_oneof![9 => 0..K, 1 => Just(IGNORE_LABEL)], n),
        )
    })
}

fn cm(pred: &[u8], gt: &[u8]) -> ConfusionMatrix {
    let mut c = ConfusionMatrix::default();
    c.update(pred, gt).unwrap();
    c
}

proptest! {
    #[test]
    fn merge_is_associative_and_commutative(a in pairs(64), b in pairs(64), c in pairs(64)) {
        let (ca, cb, cc) = (cm(&a.0, &a.1), cm(&b.0, &b.1), cm(&c.0, &c.1));
        let mut left = ca.clone();
        left.merge(&cb);
        left.merge(&cc);
        let mut bc = cb.clone();
        bc.merge(&cc);
        let mut right = ca.clone();
        right.merge(&bc);
        prop_assert_eq!(&left, &right);
        let mut swapped = cc.clone();
        swapped.merge(&ca);
        swapped.merge(&cb);
        prop_assert_eq!(&left, &swapped);
        // merging equals one update over the concatenation
        let cat = |i: usize| [a.clone(), b.clone(), c.clone()].iter().flat_map(|p| if i == 0 { p.0.clone() } else { p.1.clone() }).collect::<Vec<u8>>();
        prop_assert_eq!(left, cm(&cat(0), &cat(1)));
    }

    #[test]
    fn ignored_pixels_do_not_count(p in pairs(128), extra in prop::collection::vec(0..K, 1..32)) {
        let base = cm(&p.0, &p.1);
        let mut pred = p.0.clone();
        let mut gt = p.1.clone();
        pred.extend(&extra);
        gt.extend(std::iter::repeat_n(IGNORE_LABEL, extra.len()));
        prop_assert_eq!(cm(&pred, &gt), base);
    }

    #[test]
    fn iou_is_bounded_and_mean_of_defined(p in pairs(256)) {
        let c = cm(&p.0, &p.1);
        let ious = c.per_class_iou();
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        for v in &defined {
            prop_assert!((0.0..=1.0).contains(v));
        }
        match c.miou() {
            Ok(m) => prop_assert!((m - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-15),
            Err(_) => prop_assert!(defined.is_empty()),
        }
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(0..K, 1..256)) {
        let c = cm(&gt, &gt);
        prop_assert_eq!(c.miou().unwrap(), 1.0);
        for (k, v) in c.per_class_iou().iter().enumerate() {
            prop_assert_eq!(v.is_some(), gt.contains(&(k as u8)));
        }
    }
}

#[test]
fn uniform_random_prediction_has_chance_iou() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 2_000_000;
    let gt: Vec<u8> = (0..n).map(|_| rng.random_range(0..K)).collect();
    let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..K)).collect();
    let expected = 1.0 / (2.0 * NUM_CLASSES as f64 - 1.0);
    let m = cm(&pred, &gt).miou().unwrap();
    assert!((m - expected).abs() < 0.02 * expected, "{m} vs {expected}");
}

#[test]
fn malformed_inputs_are_rejected() {
    let mut c = ConfusionMatrix::default();
    assert!(c.update(&[0, 1], &[0]).is_err());
    assert!(c.update(&[K], &[0]).is_err());
    assert!(c.update(&[0], &[K]).is_err());
    assert!(c.update(&[IGNORE_LABEL], &[0]).is_err());
    assert_eq!(c, ConfusionMatrix::default());
    assert!(c.miou().is_err());
}
