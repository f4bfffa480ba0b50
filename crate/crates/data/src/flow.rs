//! Early fusion of a precomputed optical-flow field as two extra channels.

use ddnet_core::{Shape4, Tensor4};

use crate::error::{DataError, Result};
use crate::sample::Sample;

/// Per-pixel displacement `(u, v)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(DataError::Shape(format!("flow components do not cover {height}x{width}")));
        }
        Ok(FlowField { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }
}

/// Appends flow magnitude and direction, `atan2(v, u) / pi` in `[-1, 1]`
/// (0 where the flow is zero), to an RGB sample.
pub fn fuse_flow(s: &Sample, flow: &FlowField) -> Result<Sample> {
    if s.channels() != 3 {
        return Err(DataError::Shape(format!("flow fusion expects RGB, got {} channels", s.channels())));
    }
    if (flow.height, flow.width) != (s.height(), s.width()) {
        return Err(DataError::Shape(format!(
            "flow {}x{} does not match image {}x{}",
            flow.height,
            flow.width,
            s.height(),
            s.width()
        )));
    }
    let mut data = s.image.data().to_vec();
    data.extend(flow.u.iter().zip(&flow.v).map(|(&u, &v)| u.hypot(v)));
    data.extend(flow.u.iter().zip(&flow.v).map(|(&u, &v)| {
        if u == 0.0 && v == 0.0 {
            0.0
        } else {
            v.atan2(u) / std::f32::consts::PI
        }
    }));
    let image = Tensor4::from_vec(Shape4::new(1, 5, s.height(), s.width()), data)?;
    Sample::new(s.id.clone(), image, s.label.clone())
}
