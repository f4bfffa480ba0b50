//! Confusion-matrix metrics: per-class IoU, mean IoU and global accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, LabelSpace};
use crate::real::Real;
use crate::tensor::Tensor4;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    space: LabelSpace,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(space: LabelSpace) -> Self {
        let n = space.num_classes;
        ConfusionMatrix {
            space,
            counts: vec![0; n * n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.space.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one image. Void truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::invalid(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let n = self.num_classes();
        let mut add = vec![0u64; n * n];
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let Some(t) = self.space.target(t)? else { continue };
            let p = usize::from(p);
            if p >= n {
                return Err(Error::LabelOutOfRange { label: p, classes: n });
            }
            add[t * n + p] += 1;
        }
        for (c, a) in self.counts.iter_mut().zip(add) {
            *c += a;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.space != other.space {
            return Err(Error::invalid("cannot merge confusion matrices over different label spaces"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// truth and prediction and for an in-range void class.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.num_classes();
        (0..n)
            .map(|c| {
                if Some(c) == self.space.void_class() {
                    return None;
                }
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean of the defined per-class IoUs; `None` when none is defined.
    pub fn mean_iou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Trace over total; `None` for an empty matrix.
    pub fn global_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let trace: u64 = (0..self.num_classes()).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| trace as f64 / total as f64)
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.num_classes();
        MetricsReport {
            per_class_iou: self.iou_per_class(),
            mean_iou: self.mean_iou(),
            global_accuracy: self.global_accuracy(),
            pixels: self.total(),
            truth_pixels: (0..n).map(|c| (0..n).map(|p| self.get(c, p)).sum()).collect(),
            confusion: (0..n).map(|t| (0..n).map(|p| self.get(t, p)).collect()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
    pub global_accuracy: Option<f64>,
    /// Non-void pixels evaluated.
    pub pixels: u64,
    pub truth_pixels: Vec<u64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x));
        let mut out = String::new();
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(out, "class {c:>3}  iou {:>8}  pixels {}", fmt(*iou), self.truth_pixels[c]);
        }
        let _ = writeln!(out, "mean iou      {}", fmt(self.mean_iou));
        let _ = writeln!(out, "global acc    {}", fmt(self.global_accuracy));
        let _ = writeln!(out, "pixels        {}", self.pixels);
        out
    }
}

/// Channel argmax per pixel; ties go to the lowest class index.
pub fn predict<T: Real>(logits: &Tensor4<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    let plane = s.plane();
    let v = logits.data();
    (0..s.n)
        .map(|n| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if v[(n * s.c + c) * plane + p] > v[(n * s.c + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(s.h, s.w, data).expect("plane sized")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::VOID;
    use crate::tensor::Shape4;

    fn cm_from(rows: &[[u64; 2]; 2]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(LabelSpace::new(2));
        for t in 0..2 {
            for p in 0..2 {
                cm.counts[t * 2 + p] = rows[t][p];
            }
        }
        cm
    }

    #[test]
    fn hand_evaluated_matrix() {
        let cm = cm_from(&[[3, 1], [2, 4]]);
        let iou = cm.iou_per_class();
        assert!((iou[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((iou[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((cm.mean_iou().unwrap() - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((cm.global_accuracy().unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(LabelSpace::new(3));
        let truth = LabelMap::new(1, 4, vec![0, 0, 1, VOID]).unwrap();
        cm.accumulate(&truth.clone(), &LabelMap::new(1, 4, vec![0, 0, 1, 2]).unwrap()).unwrap_err();
        cm.accumulate(&LabelMap::new(1, 4, vec![0, 0, 1, 2]).unwrap(), &truth).unwrap();
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.iou_per_class()[2], None);
        assert_eq!(cm.mean_iou(), Some(1.0));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let logits = Tensor4::from_vec(Shape4::new(1, 3, 1, 2), vec![1.0f64, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(predict(&logits)[0].data(), &[0, 1]);
    }
}
