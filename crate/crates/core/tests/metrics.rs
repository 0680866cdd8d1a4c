use proptest::prelude::*;
use vesselgan::datapipe::Plane;
use vesselgan::metrics::{
    binarize, confusion, evaluate_set, scores, sweep_thresholds, write_reports_csv, ConfusionCounts, EvalItem,
    CSV_HEADER,
};

fn plane(rows: &[&[f64]]) -> Plane {
    Plane::new(rows.len(), rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
}

fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts { tp, tn, fp, fn_ }
}

fn close(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() <= 1e-12)
}

#[test]
fn perfect_counts_score_one_everywhere() {
    let s = scores(&counts(1, 1, 0, 0));
    for v in [s.accuracy, s.sensitivity, s.specificity, s.precision, s.recall, s.f_measure] {
        assert_eq!(v, Some(1.0));
    }
}

#[test]
fn hand_evaluated_scores() {
    let s = scores(&counts(8, 88, 2, 2));
    assert!(close(s.precision, 0.8));
    assert!(close(s.sensitivity, 0.8));
    assert!(close(s.f_measure, 0.8));
    assert!(close(s.accuracy, 0.96));
    assert!(close(s.specificity, 88.0 / 90.0));
    assert_eq!(s.recall, s.sensitivity);

    let s = scores(&counts(2, 0, 0, 2));
    assert_eq!(s.sensitivity, Some(0.5));
    assert_eq!(s.specificity, None);
}

#[test]
fn two_by_two_confusion() {
    let pred = plane(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let gt = plane(&[&[1.0, 1.0], &[0.0, 0.0]]);
    assert_eq!(confusion(&pred, &gt, None).unwrap(), counts(1, 1, 1, 1));
}

#[test]
fn micro_aggregate_pools_counts() {
    // image a: tp=1 tn=1 fp=1 fn=1; image b: tp=3 tn=3
    let a_gt = plane(&[&[1.0, 1.0, 0.0, 0.0]]);
    let a_p = plane(&[&[0.9, 0.1, 0.7, 0.2]]);
    let b_gt = plane(&[&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]]);
    let b_p = plane(&[&[0.8, 0.6, 0.5, 0.0, 0.3, 0.49]]);
    let items = [
        EvalItem { id: "a", prob: &a_p, gt: &a_gt, mask: None },
        EvalItem { id: "b", prob: &b_p, gt: &b_gt, mask: None },
    ];
    let r = evaluate_set(&items, 0.5).unwrap();
    assert_eq!(r.per_image[0].counts, counts(1, 1, 1, 1));
    assert_eq!(r.per_image[1].counts, counts(3, 3, 0, 0));
    assert_eq!(r.micro.counts, counts(4, 4, 1, 1));
    assert!(close(r.micro.scores.accuracy, 0.8));
    assert!(close(r.macro_avg.accuracy, 0.75));
}

#[test]
fn single_and_duplicated_images() {
    let gt = plane(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]);
    let p = plane(&[&[0.7, 0.6, 0.2], &[0.1, 0.0, 0.9]]);
    let one = evaluate_set(&[EvalItem { id: "x", prob: &p, gt: &gt, mask: None }], 0.5).unwrap();
    let direct = scores(&confusion(&binarize(&p, 0.5, None), &gt, None).unwrap());
    assert_eq!(one.per_image[0].scores, direct);
    assert_eq!(one.micro.scores, direct);

    let item = EvalItem { id: "x", prob: &p, gt: &gt, mask: None };
    let two = evaluate_set(&[item, item], 0.5).unwrap();
    assert_eq!(two.micro.scores, direct);
    assert_eq!(two.macro_avg, direct);
}

#[test]
fn mask_restriction_equals_cropping_the_masked_pixels() {
    let gt = plane(&[&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 1.0, 0.0]]);
    let p = plane(&[&[0.9, 0.8, 0.1, 0.3], &[0.7, 0.6, 0.5, 0.2]]);
    let mask = plane(&[&[1.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 1.0]]);
    let masked = confusion(&binarize(&p, 0.5, Some(&mask)), &gt, Some(&mask)).unwrap();
    assert_eq!(masked.total(), 5);

    let keep: Vec<usize> = (0..8).filter(|&i| mask.data[i] > 0.5).collect();
    let crop = |src: &Plane| Plane::new(1, keep.len(), keep.iter().map(|&i| src.data[i]).collect()).unwrap();
    let direct = confusion(&binarize(&crop(&p), 0.5, None), &crop(&gt), None).unwrap();
    assert_eq!(masked, direct);
    assert_eq!(binarize(&p, 0.0, Some(&mask)).data, mask.data);
}

#[test]
fn errors_carry_the_image_id() {
    let gt = plane(&[&[1.0, 0.0]]);
    let p = plane(&[&[1.0, 0.0, 1.0]]);
    let err = evaluate_set(&[EvalItem { id: "bad", prob: &p, gt: &gt, mask: None }], 0.5).unwrap_err();
    assert!(err.to_string().contains("bad"), "{err}");
    assert!(evaluate_set(&[], 0.5).is_err());
    let ok = EvalItem { id: "ok", prob: &gt, gt: &gt, mask: None };
    assert!(evaluate_set(&[ok], 1.5).is_err());
}

#[test]
fn csv_report_layout() {
    let gt = plane(&[&[1.0, 0.0]]);
    let p = plane(&[&[0.8, 0.1]]);
    let items = [EvalItem { id: "img", prob: &p, gt: &gt, mask: None }];
    let reports: Vec<_> = sweep_thresholds().iter().map(|&t| evaluate_set(&items, t).unwrap()).collect();
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &reports).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 19 * 3);
    assert_eq!(lines[1 + 9 * 3], "img,0.5,1,1,0,0,1,1,1,1,1");
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 11));
}

fn counts_strategy() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, tn, fp, fn_)| counts(tp, tn, fp, fn_))
}

proptest! {
    #[test]
    fn accuracy_identity_holds(c in counts_strategy()) {
        let s = scores(&c);
        match s.accuracy {
            Some(a) => prop_assert_eq!((a * c.total() as f64).round() as u64, c.tp + c.tn),
            None => prop_assert_eq!(c.total(), 0),
        }
    }

    #[test]
    fn f_measure_is_harmonic_mean(c in counts_strategy()) {
        let s = scores(&c);
        prop_assert_eq!(s.recall, s.sensitivity);
        if let (Some(p), Some(r)) = (s.precision, s.recall) {
            if p > 0.0 && r > 0.0 {
                let f = s.f_measure.unwrap();
                prop_assert!((f - 2.0 * p * r / (p + r)).abs() <= 1e-12);
                prop_assert!((1.0 / f - 0.5 * (1.0 / p + 1.0 / r)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn lowering_the_threshold_never_loses_positives(
        probs in prop::collection::vec(0.0f64..=1.0, 16),
        truth in prop::collection::vec(any::<bool>(), 16),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let p = Plane::new(4, 4, probs).unwrap();
        let gt = Plane::new(4, 4, truth.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let at_lo = confusion(&binarize(&p, lo, None), &gt, None).unwrap();
        let at_hi = confusion(&binarize(&p, hi, None), &gt, None).unwrap();
        prop_assert!(at_lo.tp >= at_hi.tp);
        prop_assert!(at_lo.fp >= at_hi.fp);
        prop_assert_eq!(at_lo.total(), 16);
    }
}
