//! Parameterised layers shared by blocks and the network graph.

use crate::autodiff::{Padding, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamRegistry};
use crate::real::Real;
use crate::session::Session;
use crate::tensor::Shape4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    pub fn apply<T: Real>(self, s: &mut Session<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => s.tape.relu(x),
            Activation::Elu => s.tape.elu(x, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// `kernel x kernel` convolution with `Same` padding.
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = reg.register(
            format!("{name}.weight"),
            Shape4::new(out_ch, in_ch, kernel, kernel),
            Init::HeNormal {
                fan_in: in_ch * kernel * kernel,
            },
            true,
        );
        let bias = bias.then(|| reg.register(format!("{name}.bias"), Shape4::new(1, out_ch, 1, 1), Init::Zeros, true));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.stride, Padding::Same)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl DepthwiseConv2d {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize, kernel: usize, stride: usize) -> Self {
        let weight = reg.register(
            format!("{name}.weight"),
            Shape4::new(channels, 1, kernel, kernel),
            Init::HeNormal {
                fan_in: kernel * kernel,
            },
            true,
        );
        DepthwiseConv2d {
            weight,
            channels,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.depthwise_conv2d(x, w, None, self.stride, Padding::Same)
    }
}

/// Transposed convolution with `kernel == stride`, so the output is exactly
/// `stride` times larger.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        // Each output pixel sees in_ch * (kernel / stride)^2 inputs.
        let overlap = (kernel * kernel).div_ceil(stride * stride).max(1);
        let weight = reg.register(
            format!("{name}.weight"),
            Shape4::new(in_ch, out_ch, kernel, kernel),
            Init::HeNormal {
                fan_in: in_ch * overlap,
            },
            true,
        );
        let bias = bias.then(|| reg.register(format!("{name}.bias"), Shape4::new(1, out_ch, 1, 1), Init::Zeros, true));
        ConvTranspose2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv_transpose2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Self {
        let shape = Shape4::new(1, channels, 1, 1);
        BatchNorm {
            gamma: reg.register(format!("{name}.gamma"), shape, Init::Ones, true),
            beta: reg.register(format!("{name}.beta"), shape, Init::Zeros, true),
            running_mean: reg.register(format!("{name}.running_mean"), shape, Init::Zeros, false),
            running_var: reg.register(format!("{name}.running_var"), shape, Init::Ones, false),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Pre-activation composite: batch norm, activation, convolution.
#[derive(Clone, Debug)]
pub struct BnActConv {
    pub bn: BatchNorm,
    pub act: Activation,
    pub conv: Conv2d,
}

impl BnActConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        act: Activation,
        bias: bool,
    ) -> Self {
        BnActConv {
            bn: BatchNorm::new(reg, &format!("{name}.bn"), in_ch),
            act,
            conv: Conv2d::new(reg, &format!("{name}.conv"), in_ch, out_ch, kernel, 1, bias),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(s, x)?;
        let y = self.act.apply(s, y);
        self.conv.forward(s, y)
    }
}
