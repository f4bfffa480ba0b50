//! Procedural segmentation datasets with controlled class imbalance.
//!
//! Every image starts filled with the most frequent class. The other classes
//! are painted as shapes, rarest first, only over still-unclaimed pixels and
//! only until the class reaches its per-image pixel target, so dataset pixel
//! counts track the requested ratios closely.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use ddnet_core::losses::ClassFrequency;
use ddnet_core::{LabelMap, VOID};

use crate::error::{DataError, Result};
use crate::palette::Palette;
use crate::pngio::{self, Rgb8};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Disk,
    Ellipse,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: usize,
    /// Relative pixel frequency per class, e.g. `[20, 5, 1]`.
    pub class_ratios: Vec<f64>,
    pub shapes: Vec<ShapeKind>,
    /// Mean color per class, channels in `[0, 1]`.
    pub class_colors: Vec<[f64; 3]>,
    /// Standard deviation of the per-image shift of each class color.
    pub color_jitter: f64,
    /// Standard deviation of independent per-pixel noise.
    pub noise: f64,
    /// Per-image targets are scaled by a uniform factor in `1 +- target_jitter`.
    pub target_jitter: f64,
}

impl SynthSpec {
    /// Three classes on 64x64 canvases, 250 images, rare class 20:1.
    pub fn tiny() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            num_classes: 3,
            images: 250,
            class_ratios: vec![20.0, 5.0, 1.0],
            shapes: vec![ShapeKind::Rect, ShapeKind::Disk, ShapeKind::Ellipse, ShapeKind::Triangle],
            class_colors: vec![[0.45, 0.45, 0.45], [0.25, 0.4, 0.75], [0.6, 0.3, 0.55]],
            color_jitter: 0.06,
            noise: 0.08,
            target_jitter: 0.2,
        }
    }

    /// Default look for `num_classes` classes: colors spread around a hue
    /// circle, equal ratios unless overridden.
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self.class_colors = (0..num_classes)
            .map(|c| hue(c as f64 / num_classes.max(1) as f64))
            .collect();
        self.class_ratios = vec![1.0; num_classes];
        self
    }

    pub fn fill_class(&self) -> usize {
        let mut best = 0;
        for (c, &r) in self.class_ratios.iter().enumerate() {
            if r > self.class_ratios[best] {
                best = c;
            }
        }
        best
    }

    /// Nominal per-image pixel target of every class.
    fn nominal_targets(&self) -> Vec<f64> {
        let total: f64 = self.class_ratios.iter().sum();
        let pixels = (self.height * self.width) as f64;
        self.class_ratios.iter().map(|r| pixels * r / total).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Infeasible(m));
        if self.num_classes == 0 || self.num_classes > usize::from(VOID) {
            return bad(format!("num_classes must be in 1..=254, got {}", self.num_classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.class_ratios.len() != self.num_classes || self.class_colors.len() != self.num_classes {
            return bad(format!(
                "{} ratios and {} colors for {} classes",
                self.class_ratios.len(),
                self.class_colors.len(),
                self.num_classes
            ));
        }
        if self.class_ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return bad("class ratios must be positive and finite".into());
        }
        if !(0.0..1.0).contains(&self.target_jitter) || self.noise < 0.0 || self.color_jitter < 0.0 {
            return bad("jitter and noise must be nonnegative; target jitter below 1".into());
        }
        if self.num_classes > 1 && self.shapes.is_empty() {
            return bad("at least one shape kind is needed".into());
        }
        let fill = self.fill_class();
        let nominal = self.nominal_targets();
        let painted: f64 = nominal.iter().enumerate().filter(|(c, _)| *c != fill).map(|(_, t)| t).sum();
        if painted * (1.0 + self.target_jitter) > (self.height * self.width) as f64 {
            return bad("painted classes would not fit on the canvas".into());
        }
        if let Some((c, t)) = nominal.iter().enumerate().find(|(_, t)| **t * (1.0 - self.target_jitter) < 1.0) {
            return bad(format!(
                "class {c} would cover {t:.2} pixels per {}x{} image; ratio too extreme",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

fn hue(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        0.7 - 0.5 * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Pixels per class.
    pub counts: Vec<u64>,
    pub void: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// A single-class dataset: valid, but useless for training.
    pub degenerate: bool,
    pub class_ratios: Vec<f64>,
    pub images: Vec<ImageEntry>,
    pub totals: Vec<u64>,
    pub void_pixels: u64,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(DataError::io(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Median-frequency inputs over the listed images (all when `ids` is `None`).
    pub fn class_frequencies(&self, ids: Option<&[String]>) -> Vec<ClassFrequency> {
        let mut out = vec![ClassFrequency::default(); self.num_classes];
        for img in &self.images {
            if ids.is_some_and(|ids| !ids.contains(&img.id)) {
                continue;
            }
            let labelled: u64 = img.counts.iter().sum();
            for (f, &n) in out.iter_mut().zip(&img.counts) {
                if n > 0 {
                    f.pixels += n;
                    f.presence_pixels += labelled;
                }
            }
        }
        out
    }
}

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const PALETTE_FILE: &str = "palette.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join(IMAGES_DIR).join(format!("{id}.png"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join(LABELS_DIR).join(format!("{id}.png"))
}

/// Renders one image and its label map.
pub fn render(spec: &SynthSpec, seed: u64, index: usize) -> Result<(Rgb8, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let fill = spec.fill_class() as u8;
    let mut label = LabelMap::filled(h, w, fill);

    let nominal = spec.nominal_targets();
    let mut order: Vec<usize> = (0..spec.num_classes).filter(|&c| c != usize::from(fill)).collect();
    order.sort_by(|&a, &b| spec.class_ratios[a].total_cmp(&spec.class_ratios[b]).then(a.cmp(&b)));
    for c in order {
        let jitter = 1.0 + spec.target_jitter * (2.0 * rng.gen::<f64>() - 1.0);
        let target = (nominal[c] * jitter).round().max(1.0) as usize;
        paint_class(spec, &mut label, c as u8, fill, target, &mut rng)
            .ok_or_else(|| DataError::Infeasible(format!("image {index}: could not place {target} pixels of class {c}")))?;
    }

    let shifts: Vec<[f64; 3]> = (0..spec.num_classes)
        .map(|_| [0; 3].map(|_| spec.color_jitter * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for &l in label.data() {
        let c = usize::from(l);
        for k in 0..3 {
            let v = spec.class_colors[c][k] + shifts[c][k] + spec.noise * rng.sample::<f64, _>(StandardNormal);
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((Rgb8 { height: h, width: w, data }, label))
}

/// Paints shapes of class `c` over `fill` pixels until exactly `target`
/// pixels carry `c`. Returns `None` if it keeps failing to find room.
fn paint_class(spec: &SynthSpec, label: &mut LabelMap, c: u8, fill: u8, target: usize, rng: &mut ChaCha8Rng) -> Option<()> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut remaining = target;
    for _ in 0..1000 {
        if remaining == 0 {
            return Some(());
        }
        let kind = *spec.shapes.choose(rng)?;
        let area = if remaining < 64 {
            remaining as f64
        } else {
            remaining as f64 * rng.gen_range(0.35..1.0)
        };
        let r = (area / std::f64::consts::PI).sqrt().max(1.0);
        let (cy, cx) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        // Equilateral triangle of the same area as the disk.
        let tri_r = r * (4.0 * std::f64::consts::PI / (3.0 * 3f64.sqrt())).sqrt();
        let tri: Vec<(f64, f64)> = (0..3)
            .map(|k| {
                let a = angle + k as f64 * std::f64::consts::TAU / 3.0;
                (cx + tri_r * a.cos(), cy + tri_r * a.sin())
            })
            .collect();
        let inside = |y: f64, x: f64| -> bool {
            let (dy, dx) = (y - cy, x - cx);
            let (u, v) = (dx * cos + dy * sin, dy * cos - dx * sin);
            match kind {
                ShapeKind::Disk => dx * dx + dy * dy <= r * r,
                ShapeKind::Ellipse => (u / (r * aspect.sqrt())).powi(2) + (v * aspect.sqrt() / r).powi(2) <= 1.0,
                ShapeKind::Rect => {
                    let half = r * std::f64::consts::PI.sqrt() / 2.0;
                    u.abs() <= half * aspect.sqrt() && v.abs() <= half / aspect.sqrt()
                }
                ShapeKind::Triangle => (0..3).all(|k| {
                    let (ax, ay) = tri[k];
                    let (bx, by) = tri[(k + 1) % 3];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                }),
            }
        };
        // Every shape fits in a box of half-width 2r.
        let y0 = (cy - 2.0 * r).floor().max(0.0) as usize;
        let y1 = ((cy + 2.0 * r).ceil() as usize).min(spec.height);
        let x0 = (cx - 2.0 * r).floor().max(0.0) as usize;
        let x1 = ((cx + 2.0 * r).ceil() as usize).min(spec.width);
        'rows: for y in y0..y1 {
            for x in x0..x1 {
                if remaining == 0 {
                    break 'rows;
                }
                if label.get(y, x) == fill && inside(y as f64 + 0.5, x as f64 + 0.5) {
                    label.set(y, x, c);
                    remaining -= 1;
                }
            }
        }
    }
    (remaining == 0).then_some(())
}

fn tally(label: &LabelMap, num_classes: usize) -> (Vec<u64>, u64) {
    let hist = label.histogram();
    (hist[..num_classes].to_vec(), hist[usize::from(VOID)])
}

/// Writes `images/`, `labels/`, `palette.txt` and `manifest.json` under `out`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let palette = Palette::default_for(spec.num_classes);
    for d in [IMAGES_DIR, LABELS_DIR] {
        fs::create_dir_all(out.join(d)).map_err(DataError::io(out.join(d)))?;
    }
    let mut images = Vec::with_capacity(spec.images);
    let mut totals = vec![0u64; spec.num_classes];
    let mut void_pixels = 0;
    for i in 0..spec.images {
        let id = format!("img_{i:05}");
        let (rgb, label) = render(spec, seed, i)?;
        pngio::write_rgb(&image_path(out, &id), &rgb)?;
        pngio::write_label(&label_path(out, &id), &label, &palette)?;
        let (counts, void) = tally(&label, spec.num_classes);
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
        void_pixels += void;
        images.push(ImageEntry { id, counts, void });
    }
    let manifest = Manifest {
        seed,
        height: spec.height,
        width: spec.width,
        num_classes: spec.num_classes,
        degenerate: spec.num_classes < 2,
        class_ratios: spec.class_ratios.clone(),
        images,
        totals,
        void_pixels,
    };
    if manifest.degenerate {
        log::warn!("synthetic dataset has a single class; it is valid but degenerate");
    }
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(DataError::io(p))
    };
    write(PALETTE_FILE, palette.to_text())?;
    write(MANIFEST_FILE, manifest.to_json())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_met_exactly_per_image() {
        let spec = SynthSpec::tiny();
        let nominal = spec.nominal_targets();
        for i in 0..5 {
            let (_, label) = render(&spec, 1, i).unwrap();
            let (counts, _) = tally(&label, 3);
            for c in 1..3 {
                let lo = (nominal[c] * 0.8).round() as u64;
                let hi = (nominal[c] * 1.2).round() as u64;
                assert!((lo..=hi).contains(&counts[c]), "class {c}: {}", counts[c]);
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = SynthSpec::tiny();
        spec.class_ratios = vec![1.0, 1.0, 5000.0];
        assert!(matches!(spec.validate(), Err(DataError::Infeasible(_))));
        spec.class_ratios = vec![1.0, 0.0, 1.0];
        assert!(spec.validate().is_err());
        spec.class_ratios = vec![1.0, 1.0];
        assert!(spec.validate().is_err());
    }
}
