//! Random crops, flips and mean subtraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ddnet_core::{Shape4, Tensor4};

use crate::error::{DataError, Result};
use crate::sample::Sample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    #[default]
    Vertical,
    Horizontal,
    None,
}

impl std::str::FromStr for Flip {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vertical" => Ok(Flip::Vertical),
            "horizontal" => Ok(Flip::Horizontal),
            "none" => Ok(Flip::None),
            _ => Err(format!("unknown flip {s:?} (expected vertical, horizontal or none)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    /// `(height, width)` of the random window; `None` keeps the full image.
    pub crop: Option<(usize, usize)>,
    /// Independent windows drawn per source image and epoch.
    pub windows: usize,
    pub flip: Flip,
    pub flip_prob: f64,
    /// Per-channel mean subtracted from the image.
    pub mean: Option<Vec<f32>>,
}

impl AugPolicy {
    pub fn identity() -> Self {
        AugPolicy {
            crop: None,
            windows: 1,
            flip: Flip::None,
            flip_prob: 0.0,
            mean: None,
        }
    }

    pub fn training(crop: (usize, usize), mean: Vec<f32>) -> Self {
        AugPolicy {
            crop: Some(crop),
            windows: 2,
            flip: Flip::Vertical,
            flip_prob: 0.5,
            mean: Some(mean),
        }
    }
}

pub fn crop(s: &Sample, y: usize, x: usize, h: usize, w: usize) -> Result<Sample> {
    if y + h > s.height() || x + w > s.width() {
        return Err(DataError::Shape(format!(
            "crop {h}x{w} at ({y}, {x}) does not fit a {}x{} image",
            s.height(),
            s.width()
        )));
    }
    let c = s.channels();
    let src = s.image.data();
    let plane = s.height() * s.width();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for row in y..y + h {
            let start = ch * plane + row * s.width() + x;
            data.extend_from_slice(&src[start..start + w]);
        }
    }
    let image = Tensor4::from_vec(Shape4::new(1, c, h, w), data)?;
    Sample::new(s.id.clone(), image, s.label.crop(y, x, h, w)?)
}

pub fn flip(s: &Sample, dir: Flip) -> Sample {
    let (h, w) = (s.height(), s.width());
    let src = s.image.data();
    let mut data = vec![0.0f32; src.len()];
    let (label, map): (_, Box<dyn Fn(usize, usize) -> (usize, usize)>) = match dir {
        Flip::None => return s.clone(),
        Flip::Vertical => (s.label.flip_vertical(), Box::new(move |y, x| (h - 1 - y, x))),
        Flip::Horizontal => (s.label.flip_horizontal(), Box::new(move |y, x| (y, w - 1 - x))),
    };
    for ch in 0..s.channels() {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y, x);
                data[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Sample {
        id: s.id.clone(),
        image: Tensor4::from_vec(s.image.shape(), data).expect("same shape"),
        label,
    }
}

pub fn subtract_mean(s: &Sample, mean: &[f32]) -> Result<Sample> {
    if mean.len() != s.channels() {
        return Err(DataError::Shape(format!(
            "{} channel means for a {}-channel image",
            mean.len(),
            s.channels()
        )));
    }
    let plane = s.height() * s.width();
    let mut out = s.clone();
    for (ch, m) in mean.iter().enumerate() {
        for v in &mut out.image.data_mut()[ch * plane..(ch + 1) * plane] {
            *v -= m;
        }
    }
    Ok(out)
}

/// One crop, flip and mean subtraction drawn from `rng`. Randomness is
/// consumed in a fixed order: crop row, crop column, flip coin.
pub fn augment<R: Rng + ?Sized>(s: &Sample, policy: &AugPolicy, rng: &mut R) -> Result<Sample> {
    let mut out = match policy.crop {
        Some((h, w)) => {
            if h > s.height() || w > s.width() || h == 0 || w == 0 {
                return Err(DataError::Shape(format!(
                    "crop {h}x{w} larger than image {}x{}",
                    s.height(),
                    s.width()
                )));
            }
            let y = rng.gen_range(0..=s.height() - h);
            let x = rng.gen_range(0..=s.width() - w);
            crop(s, y, x, h, w)?
        }
        None => s.clone(),
    };
    if policy.flip != Flip::None && policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob.min(1.0)) {
        out = flip(&out, policy.flip);
    }
    if let Some(mean) = &policy.mean {
        out = subtract_mean(&out, mean)?;
    }
    Ok(out)
}

/// `policy.windows` independent augmentations of one image.
pub fn multi_window<R: Rng + ?Sized>(s: &Sample, policy: &AugPolicy, rng: &mut R) -> Result<Vec<Sample>> {
    (0..policy.windows.max(1)).map(|_| augment(s, policy, rng)).collect()
}

/// Per-channel pixel mean over `samples`, accumulated in f64.
pub fn channel_means(samples: &[Sample]) -> Vec<f32> {
    let Some(first) = samples.first() else { return Vec::new() };
    let c = first.channels();
    let mut sums = vec![0.0f64; c];
    let mut count = 0usize;
    for s in samples {
        let plane = s.height() * s.width();
        for (ch, sum) in sums.iter_mut().enumerate() {
            *sum += s.image.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        count += plane;
    }
    sums.iter().map(|s| (s / count as f64) as f32).collect()
}
