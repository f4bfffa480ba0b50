use ddnet_core::{LabelMap, Shape4, Tensor4};

use crate::error::{DataError, Result};

/// One image with its label map. The image is a `1 x C x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor4<f32>,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor4<f32>, label: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || (s.h, s.w) != (label.height(), label.width()) {
            return Err(DataError::Shape(format!(
                "image {s} does not pair with a {}x{} label map",
                label.height(),
                label.width()
            )));
        }
        Ok(Sample {
            id: id.into(),
            image,
            label,
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape().c
    }

    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    /// Interleaved 8-bit RGB to a `[0, 1]` planar tensor.
    pub fn from_rgb8(id: impl Into<String>, height: usize, width: usize, rgb: &[u8], label: LabelMap) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(DataError::Shape(format!("{} bytes for a {height}x{width} RGB image", rgb.len())));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = f32::from(px[c]) / 255.0;
            }
        }
        let image = Tensor4::from_vec(Shape4::new(1, 3, height, width), data)?;
        Sample::new(id, image, label)
    }
}

/// Stacks samples into a batch tensor and the matching label maps.
pub fn batch(samples: &[Sample]) -> Result<(Tensor4<f32>, Vec<LabelMap>)> {
    let images: Vec<Tensor4<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let x = Tensor4::stack(&images)?;
    Ok((x, samples.iter().map(|s| s.label.clone()).collect()))
}
