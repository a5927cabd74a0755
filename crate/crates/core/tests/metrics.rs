mod common;

use cellsearch::metrics::{geometric_mean, ConfusionMatrix};
use common::{metric_oracle, rng};
use proptest::prelude::*;
use rand::Rng;

const IGNORE: u8 = 255;

#[test]
fn perfect_prediction() {
    let labels: Vec<u8> = (0..100).map(|i| (i % 3) as u8).collect();
    let mut cm = ConfusionMatrix::new(3);
    cm.update(&labels, &labels).unwrap();
    assert_eq!((0..3).map(|c| cm.get(c, c)).sum::<u64>(), 100);
    let r = cm.report().unwrap();
    assert_eq!((r.miou, r.fwiou, r.macc, r.reward), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn ignored_pixels_leave_matrix_unchanged() {
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&[IGNORE; 9], &[1; 9]).unwrap();
    assert_eq!(cm, ConfusionMatrix::new(2));
    assert!(cm.miou().is_err());
    assert!(cm.reward().is_err());
}

#[test]
fn out_of_range_prediction_fails() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(cm.update(&[0, 1], &[0, 2]).is_err());
    assert!(cm.update(&[3], &[0]).is_err());
}

#[test]
fn two_by_two_hand_example() {
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    let iou = cm.iou();
    assert!((iou[0].unwrap() - 0.5).abs() < 1e-15);
    assert!((iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let r = cm.report().unwrap();
    assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    assert!((r.fwiou - 7.0 / 12.0).abs() < 1e-15);
    assert!((r.macc - 0.75).abs() < 1e-15);
    let expected = (7.0f64 / 12.0 * 7.0 / 12.0 * 0.75).powf(1.0 / 3.0);
    assert!((r.reward - expected).abs() < 1e-15);
}

#[test]
fn equal_metrics_reward() {
    assert!((geometric_mean(0.5, 0.5, 0.5) - 0.5).abs() < 1e-15);
}

#[test]
fn random_maps_match_counting_oracle() {
    let mut r = rng(11);
    for trial in 0..100 {
        let classes = r.random_range(2..=5);
        let len = r.random_range(1..200);
        let labels: Vec<u8> = (0..len)
            .map(|_| if r.random_bool(0.1) { IGNORE } else { r.random_range(0..classes) as u8 })
            .collect();
        let preds: Vec<u8> = (0..len).map(|_| r.random_range(0..classes) as u8).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&labels, &preds).unwrap();
        if cm.total() == 0 {
            continue;
        }
        let (miou, fwiou, macc) = metric_oracle(&labels, &preds, classes);
        let rep = cm.report().unwrap();
        assert!((rep.miou - miou).abs() < 1e-12, "trial {trial}");
        assert!((rep.fwiou - fwiou).abs() < 1e-12);
        assert!((rep.macc - macc).abs() < 1e-12);
        assert!((rep.reward - (miou * fwiou * macc).powf(1.0 / 3.0)).abs() < 1e-12);
        for t in 0..classes {
            for p in 0..classes {
                let n = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&l, &q)| l as usize == t && q as usize == p)
                    .count() as u64;
                assert_eq!(cm.get(t, p), n);
            }
        }
    }
}

fn maps() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
    (2usize..=5).prop_flat_map(|c| {
        let lab = prop::collection::vec(prop_oneof![9 => 0..c as u8, 1 => Just(IGNORE)], 1..120);
        lab.prop_flat_map(move |l| {
            let n = l.len();
            (Just(c), Just(l), prop::collection::vec(0..c as u8, n))
        })
    })
}

proptest! {
    #[test]
    fn metric_bounds_and_row_sums((c, labels, preds) in maps()) {
        let mut cm = ConfusionMatrix::new(c);
        cm.update(&labels, &preds).unwrap();
        let rows = cm.label_counts();
        for k in 0..c {
            prop_assert_eq!(rows[k], labels.iter().filter(|&&l| l as usize == k).count() as u64);
        }
        if cm.total() > 0 {
            let r = cm.report().unwrap();
            for m in [r.miou, r.fwiou, r.macc] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            let hi = r.miou.max(r.fwiou).max(r.macc);
            let lo = r.miou.min(r.fwiou).min(r.macc);
            prop_assert!(r.reward <= hi + 1e-12 && r.reward >= lo - 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling((c, labels, preds) in maps(), shift in 0usize..5) {
        let perm = |v: u8| if v == IGNORE { v } else { ((v as usize + shift) % c) as u8 };
        let mut a = ConfusionMatrix::new(c);
        a.update(&labels, &preds).unwrap();
        let mut b = ConfusionMatrix::new(c);
        let pl: Vec<u8> = labels.iter().map(|&v| perm(v)).collect();
        let pp: Vec<u8> = preds.iter().map(|&v| perm(v)).collect();
        b.update(&pl, &pp).unwrap();
        if a.total() > 0 {
            let (x, y) = (a.report().unwrap(), b.report().unwrap());
            prop_assert!((x.miou - y.miou).abs() < 1e-12);
            prop_assert!((x.fwiou - y.fwiou).abs() < 1e-12);
            prop_assert!((x.macc - y.macc).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_equals_joint_update((c, labels, preds) in maps(), cut in 0usize..120) {
        let cut = cut.min(labels.len());
        let mut joint = ConfusionMatrix::new(c);
        joint.update(&labels, &preds).unwrap();
        let mut a = ConfusionMatrix::new(c);
        a.update(&labels[..cut], &preds[..cut]).unwrap();
        let mut b = ConfusionMatrix::new(c);
        b.update(&labels[cut..], &preds[cut..]).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(a, joint);
    }
}
