use ddnet_core::metrics::predict;
use ddnet_core::{ConfusionMatrix, LabelMap, LabelSpace, Shape4, Tensor4, VOID};
use proptest::prelude::*;

/// IoU straight from (truth, prediction) pairs, no matrix involved.
fn iou_oracle(pairs: &[(u8, u8)], classes: usize) -> Vec<Option<f64>> {
    (0..classes as u8)
        .map(|c| {
            let kept = pairs.iter().filter(|(t, _)| *t != VOID);
            let (mut tp, mut union) = (0u64, 0u64);
            for &(t, p) in kept {
                if t == c && p == c {
                    tp += 1;
                }
                if t == c || p == c {
                    union += 1;
                }
            }
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

fn matrix(pairs: &[(u8, u8)], classes: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(LabelSpace::new(classes));
    let truth = LabelMap::new(1, pairs.len(), pairs.iter().map(|p| p.0).collect()).unwrap();
    let pred = LabelMap::new(1, pairs.len(), pairs.iter().map(|p| p.1).collect()).unwrap();
    cm.accumulate(&pred, &truth).unwrap();
    cm
}

fn pairs_strategy(classes: u8) -> impl Strategy<Value = Vec<(u8, u8)>> {
    let truth = prop_oneof![9 => 0..classes, 1 => Just(VOID)];
    prop::collection::vec((truth, 0..classes), 1..200)
}

proptest! {
    #[test]
    fn iou_matches_oracle(pairs in pairs_strategy(5)) {
        let cm = matrix(&pairs, 5);
        let got = cm.iou_per_class();
        let want = iou_oracle(&pairs, 5);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            match (g, w) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-15),
                (None, None) => {}
                _ => prop_assert!(false, "{g:?} vs {w:?}"),
            }
        }
        for v in got.iter().flatten().chain(cm.mean_iou().iter()).chain(cm.global_accuracy().iter()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let defined: Vec<f64> = want.into_iter().flatten().collect();
        if !defined.is_empty() {
            let m = defined.iter().sum::<f64>() / defined.len() as f64;
            prop_assert!((cm.mean_iou().unwrap() - m).abs() < 1e-14);
        }
    }

    #[test]
    fn merging_partitions_equals_whole(pairs in pairs_strategy(4), cut in 0usize..200) {
        let cut = cut.min(pairs.len() - 1).max(1).min(pairs.len());
        let whole = matrix(&pairs, 4);
        if cut < pairs.len() {
            let mut a = matrix(&pairs[..cut], 4);
            a.merge(&matrix(&pairs[cut..], 4)).unwrap();
            prop_assert_eq!(a, whole.clone());
        }
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        shuffled.rotate_left(cut % pairs.len());
        prop_assert_eq!(matrix(&shuffled, 4), whole);
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let pairs: Vec<(u8, u8)> = (0..30).map(|i| ((i % 3) as u8, (i % 3) as u8)).collect();
    let cm = matrix(&pairs, 4);
    assert_eq!(cm.mean_iou(), Some(1.0));
    assert_eq!(cm.global_accuracy(), Some(1.0));
    assert_eq!(cm.iou_per_class()[3], None);
}

#[test]
fn in_range_void_is_ignored() {
    let space = LabelSpace::new(3).with_void(2);
    let mut cm = ConfusionMatrix::new(space);
    let truth = LabelMap::new(1, 4, vec![0, 1, 2, 2]).unwrap();
    let pred = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
    cm.accumulate(&pred, &truth).unwrap();
    assert_eq!(cm.total(), 2);
    assert_eq!(cm.iou_per_class()[2], None);
    assert_eq!(cm.mean_iou(), Some(1.0));
}

#[test]
fn merge_rejects_other_spaces() {
    let mut a = ConfusionMatrix::new(LabelSpace::new(3));
    assert!(a.merge(&ConfusionMatrix::new(LabelSpace::new(4))).is_err());
}

#[test]
fn report_serialises() {
    let cm = matrix(&[(0, 0), (1, 0), (1, 1)], 2);
    let report = cm.report();
    let back: ddnet_core::MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
    assert!(report.to_text().contains("mean iou"));
}

#[test]
fn predict_takes_channel_argmax() {
    let logits = Tensor4::from_vec(Shape4::new(2, 2, 1, 1), vec![0.0f32, 1.0, 3.0, -1.0]).unwrap();
    let maps = predict(&logits);
    assert_eq!(maps[0].data(), &[1]);
    assert_eq!(maps[1].data(), &[0]);
}
