//! Per-pixel class maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value used for pixels that carry no class.
pub const VOID: u8 = 255;

/// Class ids `0..num_classes` plus the reserved void label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSpace {
    pub num_classes: usize,
    /// May lie inside `0..num_classes`, in which case that class is never
    /// trained on or scored.
    pub void: u8,
}

impl LabelSpace {
    pub fn new(num_classes: usize) -> Self {
        LabelSpace {
            num_classes,
            void: VOID,
        }
    }

    pub fn with_void(mut self, void: u8) -> Self {
        self.void = void;
        self
    }

    /// Training target for a label: `None` for void.
    pub fn target(&self, label: u8) -> Result<Option<usize>> {
        if label == self.void {
            return Ok(None);
        }
        let l = usize::from(label);
        if l >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: self.num_classes,
            });
        }
        Ok(Some(l))
    }

    /// In-range void index, if any.
    pub fn void_class(&self) -> Option<usize> {
        let v = usize::from(self.void);
        (v < self.num_classes).then_some(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Rectangle `[y, y + h) x [x, x + w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y}, {x}) exceeds label map {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for row in y..y + h {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + w]);
        }
        Ok(LabelMap {
            height: h,
            width: w,
            data,
        })
    }

    /// Reverses row order.
    pub fn flip_vertical(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in (0..self.height).rev() {
            data.extend_from_slice(&self.data[row * self.width..(row + 1) * self.width]);
        }
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Reverses column order.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Pixels per label value, indexed `0..=255`.
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.data {
            h[usize::from(v)] += 1;
        }
        h
    }
}

/// Training targets for a batch of label maps, flattened in `(n, h, w)`
/// order.
pub fn targets(labels: &[LabelMap], space: &LabelSpace) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(labels.iter().map(|l| l.data.len()).sum());
    for l in labels {
        for &v in &l.data {
            out.push(space.target(v)?);
        }
    }
    Ok(out)
}
