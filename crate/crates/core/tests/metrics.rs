use kneeoa::metrics::{
    class_report, class_report_with, confusion, mse, mse_grades, round_to_grade, Averaging, ConfusionMatrix,
};
use proptest::prelude::*;

fn grades(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, n)
}

fn paired() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..80).prop_flat_map(|n| (grades(n), grades(n)))
}

fn permutation() -> impl Strategy<Value = [u8; 5]> {
    Just([0u8, 1, 2, 3, 4])
        .prop_shuffle()
        .prop_map(|v| [v[0], v[1], v[2], v[3], v[4]])
}

fn metric_multiset(cm: &ConfusionMatrix) -> Vec<(u64, u64, u64)> {
    let r = class_report(cm);
    let key = |v: f64| v.to_bits();
    let mut m: Vec<_> = r
        .per_grade
        .iter()
        .map(|g| (key(g.precision), key(g.recall), key(g.f1)))
        .collect();
    m.sort();
    m
}

proptest! {
    #[test]
    fn relabelling_grades_preserves_categorical_metrics((truth, pred) in paired(), perm in permutation()) {
        let cm = confusion(&truth, &pred).unwrap();
        let pt: Vec<u8> = truth.iter().map(|&g| perm[g as usize]).collect();
        let pp: Vec<u8> = pred.iter().map(|&g| perm[g as usize]).collect();
        let moved = confusion(&pt, &pp).unwrap();
        prop_assert_eq!(moved, cm.permuted(&perm));
        prop_assert_eq!(moved.accuracy(), cm.accuracy());
        prop_assert_eq!(metric_multiset(&moved), metric_multiset(&cm));
        let (a, b) = (class_report(&cm), class_report(&moved));
        prop_assert!((a.mean_f1 - b.mean_f1).abs() < 1e-12);
    }

    #[test]
    fn reports_stay_in_the_unit_interval((truth, pred) in paired()) {
        let cm = confusion(&truth, &pred).unwrap();
        prop_assert_eq!(cm.total() as usize, truth.len());
        for averaging in [Averaging::Macro, Averaging::Weighted] {
            let r = class_report_with(&cm, averaging);
            for g in &r.per_grade {
                prop_assert!([g.precision, g.recall, g.f1].iter().all(|v| (0.0..=1.0).contains(v)));
                if g.precision > 0.0 && g.recall > 0.0 {
                    let h = 2.0 * g.precision * g.recall / (g.precision + g.recall);
                    prop_assert!((g.f1 - h).abs() < 1e-12);
                }
            }
            prop_assert!([r.mean_precision, r.mean_recall, r.mean_f1, r.accuracy].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mse_is_zero_only_on_agreement(truth in grades(12), pred in prop::collection::vec(-2.0f64..6.0, 12)) {
        let m = mse(&truth, &pred).unwrap();
        prop_assert!(m >= 0.0);
        let exact: Vec<f64> = truth.iter().map(|&g| g as f64).collect();
        prop_assert_eq!(mse(&truth, &exact).unwrap(), 0.0);
        prop_assert_eq!(m == 0.0, exact == pred);
    }

    #[test]
    fn rounding_lands_on_a_grade(p in -1e6f64..1e6) {
        let g = round_to_grade(p).unwrap();
        prop_assert!(g <= 4);
        prop_assert!(mse_grades(&[2], &[g]).unwrap() >= 0.0);
    }

    #[test]
    fn confusion_ignores_pair_order((truth, pred) in paired(), rot in 0usize..80) {
        let k = rot % truth.len();
        let mut t = truth.clone();
        let mut p = pred.clone();
        t.rotate_left(k);
        p.rotate_left(k);
        prop_assert_eq!(confusion(&t, &p).unwrap(), confusion(&truth, &pred).unwrap());
    }
}

#[test]
fn relabelling_changes_mse() {
    let (truth, pred) = ([0u8, 4], [1u8, 4]);
    let perm = [0u8, 4, 2, 3, 1];
    let pt: Vec<u8> = truth.iter().map(|&g| perm[g as usize]).collect();
    let pp: Vec<u8> = pred.iter().map(|&g| perm[g as usize]).collect();
    assert_eq!(mse_grades(&truth, &pred).unwrap(), 0.5);
    assert_eq!(mse_grades(&pt, &pp).unwrap(), 8.0);
    let before = confusion(&truth, &pred).unwrap();
    let after = confusion(&pt, &pp).unwrap();
    assert_eq!(before.accuracy(), after.accuracy());
    assert_eq!(metric_multiset(&before), metric_multiset(&after));
}

/// Detector patch classification at 100 positives and 300 negatives:
/// 84 hits and 16 misses on the joint class, 6 false alarms.
fn detector_table() -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    cm.counts[0][0] = 84;
    cm.counts[0][1] = 16;
    cm.counts[1][0] = 6;
    cm.counts[1][1] = 294;
    cm
}

fn two_places(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[test]
fn detector_class_figures_are_reproduced() {
    let r = class_report(&detector_table());
    let [pos, neg] = [r.per_grade[0], r.per_grade[1]];
    assert_eq!(
        (two_places(pos.precision), two_places(pos.recall), two_places(pos.f1)),
        (0.93, 0.84, 0.88)
    );
    assert_eq!(
        (two_places(neg.precision), two_places(neg.recall), two_places(neg.f1)),
        (0.95, 0.98, 0.96)
    );
    assert_eq!(two_places(r.mean_precision), 0.94);
    // Unweighted means of the two classes.
    assert_eq!(two_places(r.mean_recall), 0.91);
    assert_eq!(two_places(r.mean_f1), 0.92);
}

#[test]
fn detector_mean_row_matches_support_weighting() {
    let r = class_report_with(&detector_table(), Averaging::Weighted);
    for v in [r.mean_precision, r.mean_recall, r.mean_f1] {
        assert!((v - 0.94).abs() <= 0.005 + 1e-12, "{v}");
    }
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[0, 2], &[1.0, 4.0]).unwrap(), 2.5);
    assert!(mse(&[], &[]).is_err());
    assert!(mse(&[1], &[1.0, 2.0]).is_err());
    assert_eq!(round_to_grade(2.5).unwrap(), 3);
    assert_eq!(round_to_grade(-0.3).unwrap(), 0);
    assert_eq!(round_to_grade(4.7).unwrap(), 4);
    assert!(round_to_grade(f64::NAN).is_err());
}
