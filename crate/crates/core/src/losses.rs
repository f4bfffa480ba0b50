//! Class weighting and the segmentation losses built on
//! [`Tape::focal_nll`](crate::autodiff::Tape::focal_nll).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::HeadOutputs;
use crate::labels::{targets, LabelMap, LabelSpace};
use crate::real::Real;

/// Per-class loss weights. Void pixels never contribute, whatever the
/// weights say.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// In-range void class, whose weight is pinned to zero.
    pub void_index: Option<usize>,
}

impl ClassWeights {
    pub fn uniform(space: &LabelSpace) -> Self {
        let mut weights = vec![1.0; space.num_classes];
        if let Some(v) = space.void_class() {
            weights[v] = 0.0;
        }
        ClassWeights {
            weights,
            void_index: space.void_class(),
        }
    }

    pub fn new(weights: Vec<f64>, space: &LabelSpace) -> Result<Self> {
        if weights.len() != space.num_classes {
            return Err(Error::invalid(format!(
                "{} class weights for {} classes",
                weights.len(),
                space.num_classes
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("class weights must be finite and nonnegative"));
        }
        let mut weights = weights;
        if let Some(v) = space.void_class() {
            weights[v] = 0.0;
        }
        Ok(ClassWeights {
            weights,
            void_index: space.void_class(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Pixel tallies of one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    /// Void pixels.
    pub background: u64,
    /// Per-class counts; the in-range void class, if any, is left at zero.
    pub classes: Vec<u64>,
}

impl PixelCounts {
    pub fn from_labels(label: &LabelMap, space: &LabelSpace) -> Result<Self> {
        let mut counts = PixelCounts {
            background: 0,
            classes: vec![0; space.num_classes],
        };
        for &v in label.data() {
            match space.target(v)? {
                Some(c) => counts.classes[c] += 1,
                None => counts.background += 1,
            }
        }
        Ok(counts)
    }
}

/// Inverse-frequency weights of one sample, bounded below by `l` and then
/// divided by `l`.
///
/// `DW_i = (C_b + sum_j C_j) / C_i`, returned as `max(DW_i, l) / l`. Classes
/// absent from the sample and the void class get zero.
pub fn dynamic_weights(counts: &PixelCounts, l: f64, space: &LabelSpace) -> Result<ClassWeights> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::invalid(format!("dynamic weight bound L must be positive, got {l}")));
    }
    if counts.classes.len() != space.num_classes || space.num_classes == 0 {
        return Err(Error::invalid("pixel counts do not match the label space"));
    }
    let total = counts.background as f64 + counts.classes.iter().map(|&c| c as f64).sum::<f64>();
    let weights = counts
        .classes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == 0 || Some(i) == space.void_class() {
                0.0
            } else {
                (total / c as f64).max(l) / l
            }
        })
        .collect();
    Ok(ClassWeights {
        weights,
        void_index: space.void_class(),
    })
}

/// Dataset-level tallies for median frequency balancing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequency {
    /// Pixels of this class over the dataset.
    pub pixels: u64,
    /// Total pixels of the images in which the class appears.
    pub presence_pixels: u64,
}

/// `median(freq) / freq(c)` with `freq(c) = pixels / presence_pixels`.
///
/// Classes that never appear get weight zero and are listed in the second
/// return value. With an even number of present classes the median is the
/// mean of the two middle frequencies.
pub fn median_frequency_weights(
    freqs: &[ClassFrequency],
    space: &LabelSpace,
) -> Result<(ClassWeights, Vec<usize>)> {
    if freqs.len() != space.num_classes {
        return Err(Error::invalid(format!(
            "{} class frequencies for {} classes",
            freqs.len(),
            space.num_classes
        )));
    }
    let void = space.void_class();
    let freq = |c: usize| -> Option<f64> {
        let f = freqs[c];
        (Some(c) != void && f.pixels > 0 && f.presence_pixels > 0).then(|| f.pixels as f64 / f.presence_pixels as f64)
    };
    let mut present: Vec<f64> = (0..freqs.len()).filter_map(freq).collect();
    if present.is_empty() {
        return Err(Error::invalid("median frequency weights need at least one present class"));
    }
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    let mut absent = Vec::new();
    let weights = (0..freqs.len())
        .map(|c| match freq(c) {
            Some(f) => median / f,
            None => {
                if Some(c) != void {
                    log::warn!("class {c} never appears; its median frequency weight is 0");
                    absent.push(c);
                }
                0.0
            }
        })
        .collect();
    Ok((ClassWeights { weights, void_index: void }, absent))
}

fn check_logits<T: Real>(tape: &Tape<T>, logits: Var, labels: &[LabelMap], space: &LabelSpace) -> Result<()> {
    let s = tape.shape(logits);
    if s.c != space.num_classes {
        return Err(Error::ChannelMismatch {
            op: "segmentation loss",
            expected: space.num_classes,
            found: s.c,
        });
    }
    if labels.len() != s.n || labels.iter().any(|l| (l.height(), l.width()) != (s.h, s.w)) {
        return Err(Error::invalid(format!(
            "labels do not match logits {s}: {} maps",
            labels.len()
        )));
    }
    Ok(())
}

fn per_pixel<T: Real>(weights: &ClassWeights, targets: &[Option<usize>]) -> Vec<T> {
    targets
        .iter()
        .map(|t| T::from_f64_lossy(t.map_or(0.0, |c| weights.weights[c])))
        .collect()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=5.0).contains(&gamma) {
        return Err(Error::invalid(format!("focal gamma must be in [0, 5], got {gamma}")));
    }
    Ok(())
}

/// Mean over non-void pixels of `-w_y log softmax(logits)_y`.
pub fn weighted_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[LabelMap],
    weights: &ClassWeights,
    space: &LabelSpace,
) -> Result<Var> {
    focal_loss(tape, logits, labels, weights, 0.0, space)
}

/// Mean over non-void pixels of `-alpha_t (1 - p_t)^gamma log p_t`.
pub fn focal_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[LabelMap],
    alpha: &ClassWeights,
    gamma: f64,
    space: &LabelSpace,
) -> Result<Var> {
    check_gamma(gamma)?;
    check_logits(tape, logits, labels, space)?;
    if alpha.len() != space.num_classes {
        return Err(Error::invalid("class weights do not match the label space"));
    }
    let t = targets(labels, space)?;
    let w = per_pixel::<T>(alpha, &t);
    tape.focal_nll(logits, &t, &w, gamma)
}

/// Bounded dynamic weights computed per sample and applied to that sample's
/// pixels only.
fn dynamic_pixel_weights<T: Real>(labels: &[LabelMap], l: f64, space: &LabelSpace) -> Result<(Vec<Option<usize>>, Vec<T>)> {
    let mut all_t = Vec::new();
    let mut all_w = Vec::new();
    for label in labels {
        let counts = PixelCounts::from_labels(label, space)?;
        let dw = dynamic_weights(&counts, l, space)?;
        let t = targets(std::slice::from_ref(label), space)?;
        all_w.extend(per_pixel::<T>(&dw, &t));
        all_t.extend(t);
    }
    Ok((all_t, all_w))
}

/// Cross-entropy with per-sample dynamic weights.
pub fn dynamic_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[LabelMap],
    l: f64,
    space: &LabelSpace,
) -> Result<Var> {
    focal_dynamic_loss(tape, logits, labels, l, 0.0, space)
}

/// Focal loss with the bounded dynamic weight in place of `alpha_t`.
pub fn focal_dynamic_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[LabelMap],
    l: f64,
    gamma: f64,
    space: &LabelSpace,
) -> Result<Var> {
    check_gamma(gamma)?;
    check_logits(tape, logits, labels, space)?;
    let (t, w) = dynamic_pixel_weights::<T>(labels, l, space)?;
    tape.focal_nll(logits, &t, &w, gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    None,
    MedianFrequency,
    Dynamic,
    Focal,
    FocalDynamic,
}

impl WeightStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightStrategy::None => "none",
            WeightStrategy::MedianFrequency => "median_frequency",
            WeightStrategy::Dynamic => "dynamic",
            WeightStrategy::Focal => "focal",
            WeightStrategy::FocalDynamic => "focal_dynamic",
        }
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(WeightStrategy::None),
            "median_frequency" | "medfreq" => Ok(WeightStrategy::MedianFrequency),
            "dynamic" => Ok(WeightStrategy::Dynamic),
            "focal" => Ok(WeightStrategy::Focal),
            "focal_dynamic" => Ok(WeightStrategy::FocalDynamic),
            _ => Err(format!(
                "unknown weight strategy {s:?} (expected none, medfreq, dynamic, focal or focal-dynamic)"
            )),
        }
    }
}

/// A configured segmentation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLoss {
    pub strategy: WeightStrategy,
    pub space: LabelSpace,
    /// Lower bound of the dynamic weights.
    pub l: f64,
    pub gamma: f64,
    /// Focal `alpha`; uniform when unset.
    pub alpha: Option<ClassWeights>,
    /// Median frequency weights, required by that strategy.
    pub median: Option<ClassWeights>,
    pub aux_weight: f64,
}

impl SegLoss {
    pub fn new(strategy: WeightStrategy, space: LabelSpace) -> Self {
        SegLoss {
            strategy,
            space,
            l: 5.0,
            gamma: 2.0,
            alpha: None,
            median: None,
            aux_weight: 1.0,
        }
    }

    /// Loss of one head.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, logits: Var, labels: &[LabelMap]) -> Result<Var> {
        let space = &self.space;
        match self.strategy {
            WeightStrategy::None => weighted_cross_entropy(tape, logits, labels, &ClassWeights::uniform(space), space),
            WeightStrategy::MedianFrequency => {
                let w = self
                    .median
                    .as_ref()
                    .ok_or_else(|| Error::invalid("median frequency strategy needs dataset weights"))?;
                weighted_cross_entropy(tape, logits, labels, w, space)
            }
            WeightStrategy::Dynamic => dynamic_cross_entropy(tape, logits, labels, self.l, space),
            WeightStrategy::Focal => {
                let uniform = ClassWeights::uniform(space);
                let alpha = self.alpha.as_ref().unwrap_or(&uniform);
                focal_loss(tape, logits, labels, alpha, self.gamma, space)
            }
            WeightStrategy::FocalDynamic => focal_dynamic_loss(tape, logits, labels, self.l, self.gamma, space),
        }
    }

    /// Main loss plus `aux_weight` times the sum of auxiliary losses.
    pub fn supervised<T: Real>(&self, tape: &mut Tape<T>, heads: &HeadOutputs, labels: &[LabelMap]) -> Result<Var> {
        let mut total = self.loss(tape, heads.main, labels)?;
        if self.aux_weight != 0.0 {
            for &aux in &heads.aux {
                let l = self.loss(tape, aux, labels)?;
                let l = tape.scale(l, self.aux_weight);
                total = tape.add(total, l)?;
            }
        }
        Ok(total)
    }
}
