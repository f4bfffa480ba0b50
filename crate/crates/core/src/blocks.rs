//! Feature-learning blocks: residual, dense, dual-path dense and inverted
//! residual.
//!
//! Every block is built from a [`BlockSpec`] and an input width. Building
//! registers the block's parameters and fixes its output width, which
//! [`Block::out_channels`] reports without running a forward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, BnActConv, Conv2d, DepthwiseConv2d};
use crate::params::ParamRegistry;
use crate::real::Real;
use crate::session::Session;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Residual,
    Dense,
    Dpdb,
    InvertedResidual,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Residual => "residual",
            BlockKind::Dense => "dense",
            BlockKind::Dpdb => "dpdb",
            BlockKind::InvertedResidual => "inverted_residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "residual" => Some(BlockKind::Residual),
            "dense" => Some(BlockKind::Dense),
            "dpdb" => Some(BlockKind::Dpdb),
            "inverted_residual" => Some(BlockKind::InvertedResidual),
            _ => None,
        }
    }
}

/// Declarative description of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Internal repetitions `t`.
    pub layers: usize,
    /// Channels appended per dense-path layer.
    pub growth: usize,
    /// Width of the residual path.
    pub residual_width: usize,
    /// Width of the dual-path bottleneck; `4 * growth` when unset.
    pub bottleneck_width: Option<usize>,
    /// Inverted-residual expansion ratio.
    pub expansion: usize,
    /// Dual-path transform output or inverted-residual projection width.
    /// Defaults to the natural width of the block.
    pub out_channels: Option<usize>,
    pub dropout: f64,
}

impl BlockSpec {
    pub fn residual(width: usize, layers: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Residual,
            layers,
            growth: 0,
            residual_width: width,
            bottleneck_width: None,
            expansion: 1,
            out_channels: None,
            dropout: 0.0,
        }
    }

    pub fn dense(growth: usize, layers: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Dense,
            layers,
            growth,
            residual_width: 0,
            bottleneck_width: None,
            expansion: 1,
            out_channels: None,
            dropout: 0.0,
        }
    }

    pub fn dpdb(residual_width: usize, growth: usize, layers: usize, out_channels: Option<usize>) -> Self {
        BlockSpec {
            kind: BlockKind::Dpdb,
            layers,
            growth,
            residual_width,
            bottleneck_width: None,
            expansion: 1,
            out_channels,
            dropout: 0.0,
        }
    }

    pub fn inverted_residual(expansion: usize, out_channels: usize) -> Self {
        BlockSpec {
            kind: BlockKind::InvertedResidual,
            layers: 1,
            growth: 0,
            residual_width: 0,
            bottleneck_width: None,
            expansion,
            out_channels: Some(out_channels),
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck_width.unwrap_or(4 * self.growth)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Arch(format!("{} block: {msg}", self.kind.as_str())));
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.out_channels == Some(0) || self.bottleneck_width == Some(0) {
            return fail("widths must be positive");
        }
        match self.kind {
            BlockKind::Residual => {
                if self.layers == 0 || self.residual_width == 0 {
                    return fail("layers and residual_width must be positive");
                }
            }
            BlockKind::Dense => {
                if self.layers == 0 || self.growth == 0 {
                    return fail("layers and growth must be positive");
                }
            }
            BlockKind::Dpdb => {
                if self.layers == 0 || self.growth == 0 || self.residual_width == 0 {
                    return fail("layers, growth and residual_width must be positive");
                }
            }
            BlockKind::InvertedResidual => {
                if self.expansion == 0 {
                    return fail("expansion must be at least 1");
                }
            }
        }
        Ok(())
    }

    /// Output width for an input of `in_ch` channels.
    pub fn output_channels(&self, in_ch: usize) -> Result<usize> {
        self.validate()?;
        match self.kind {
            BlockKind::Residual => {
                if in_ch != self.residual_width {
                    return Err(Error::ChannelMismatch {
                        op: "residual block",
                        expected: self.residual_width,
                        found: in_ch,
                    });
                }
                Ok(in_ch)
            }
            BlockKind::Dense => Ok(in_ch + self.layers * self.growth),
            BlockKind::Dpdb => {
                if in_ch < self.residual_width {
                    return Err(Error::ChannelMismatch {
                        op: "dpdb block",
                        expected: self.residual_width,
                        found: in_ch,
                    });
                }
                Ok(self.out_channels.unwrap_or(in_ch + self.layers * self.growth))
            }
            BlockKind::InvertedResidual => Ok(self.out_channels.unwrap_or(in_ch)),
        }
    }
}

/// `x + phi(x)`, with `phi` a chain of batch norm, ReLU and 3x3 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub units: Vec<BnActConv>,
    pub width: usize,
}

impl ResidualBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, spec: &BlockSpec, in_ch: usize) -> Result<Self> {
        spec.output_channels(in_ch)?;
        let units = (0..spec.layers)
            .map(|i| BnActConv::new(reg, &format!("{name}.unit{i}"), in_ch, in_ch, 3, Activation::Relu, false))
            .collect();
        Ok(ResidualBlock { units, width: in_ch })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut phi = x;
        for unit in &self.units {
            phi = unit.forward(s, phi)?;
        }
        s.tape.add(x, phi)
    }
}

/// Each layer sees the concatenation of the block input and all earlier
/// layer outputs and contributes `growth` new channels.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<BnActConv>,
    pub in_ch: usize,
    pub growth: usize,
    pub dropout: f64,
}

impl DenseBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, spec: &BlockSpec, in_ch: usize) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layers)
            .map(|i| {
                BnActConv::new(
                    reg,
                    &format!("{name}.layer{i}"),
                    in_ch + i * spec.growth,
                    spec.growth,
                    3,
                    Activation::Elu,
                    false,
                )
            })
            .collect();
        Ok(DenseBlock {
            layers,
            in_ch,
            growth: spec.growth,
            dropout: spec.dropout,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_ch + self.layers.len() * self.growth
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = s.tape.concat_channels(&features)?;
            let y = layer.forward(s, input)?;
            let y = s.dropout(y, self.dropout)?;
            features.push(y);
        }
        s.tape.concat_channels(&features)
    }
}

/// One shared bottleneck of the dual-path block: BN, ELU, 1x1 conv, BN, ELU,
/// 3x3 conv, then a 1x1 conv to `residual_width + growth` channels.
#[derive(Clone, Debug)]
pub struct DpdbLayer {
    pub reduce: BnActConv,
    pub spatial: BnActConv,
    pub expand: Conv2d,
}

/// Intermediate values of a dual-path forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DpdbPaths {
    /// Running residual state after the last layer.
    pub residual: Var,
    /// Running dense state, absent when the input had exactly
    /// `residual_width` channels and the block has no layers.
    pub dense: Option<Var>,
    /// Concatenation of both paths.
    pub fused: Var,
    /// Output of the transform applied to `fused`.
    pub output: Var,
}

/// Dual-path dense block.
///
/// The input splits into a residual state (the first `residual_width`
/// channels) and a dense state (the rest). Each layer reads both states
/// through one bottleneck whose output is split again: the first
/// `residual_width` channels are summed into the residual state, the
/// remaining `growth` channels are appended to the dense state. The two
/// states are fused by concatenation and passed through a BN, ELU, 1x1
/// conv transform.
#[derive(Clone, Debug)]
pub struct DpdbBlock {
    pub layers: Vec<DpdbLayer>,
    pub transform: BnActConv,
    pub in_ch: usize,
    pub residual_width: usize,
    pub growth: usize,
    pub out_ch: usize,
    pub dropout: f64,
}

impl DpdbBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, spec: &BlockSpec, in_ch: usize) -> Result<Self> {
        let out_ch = spec.output_channels(in_ch)?;
        let r = spec.residual_width;
        let g = spec.growth;
        let bw = spec.bottleneck();
        let layers = (0..spec.layers)
            .map(|i| {
                let width = in_ch + i * g;
                let p = format!("{name}.layer{i}");
                DpdbLayer {
                    reduce: BnActConv::new(reg, &format!("{p}.reduce"), width, bw, 1, Activation::Elu, false),
                    spatial: BnActConv::new(reg, &format!("{p}.spatial"), bw, bw, 3, Activation::Elu, false),
                    expand: Conv2d::new(reg, &format!("{p}.expand"), bw, r + g, 1, 1, false),
                }
            })
            .collect();
        let fused = in_ch + spec.layers * g;
        let transform = BnActConv::new(reg, &format!("{name}.transform"), fused, out_ch, 1, Activation::Elu, false);
        Ok(DpdbBlock {
            layers,
            transform,
            in_ch,
            residual_width: r,
            growth: g,
            out_ch,
            dropout: spec.dropout,
        })
    }

    /// Width of the fused state before the transform.
    pub fn fused_channels(&self) -> usize {
        self.in_ch + self.layers.len() * self.growth
    }

    pub fn forward_paths<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<DpdbPaths> {
        let in_ch = s.tape.shape(x).c;
        if in_ch != self.in_ch {
            return Err(Error::ChannelMismatch {
                op: "dpdb block",
                expected: self.in_ch,
                found: in_ch,
            });
        }
        let r = self.residual_width;
        let mut residual = s.tape.slice_channels(x, 0, r)?;
        let mut dense = if in_ch > r {
            Some(s.tape.slice_channels(x, r, in_ch - r)?)
        } else {
            None
        };
        for layer in &self.layers {
            let input = match dense {
                Some(d) => s.tape.concat_channels(&[residual, d])?,
                None => residual,
            };
            let h = layer.reduce.forward(s, input)?;
            let h = layer.spatial.forward(s, h)?;
            let h = s.dropout(h, self.dropout)?;
            let h = layer.expand.forward(s, h)?;
            let res_part = s.tape.slice_channels(h, 0, r)?;
            let dense_part = s.tape.slice_channels(h, r, self.growth)?;
            residual = s.tape.add(residual, res_part)?;
            dense = Some(match dense {
                Some(d) => s.tape.concat_channels(&[d, dense_part])?,
                None => dense_part,
            });
        }
        let fused = match dense {
            Some(d) => s.tape.concat_channels(&[residual, d])?,
            None => residual,
        };
        let output = self.transform.forward(s, fused)?;
        Ok(DpdbPaths {
            residual,
            dense,
            fused,
            output,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_paths(s, x)?.output)
    }
}

/// 1x1 expansion, depthwise 3x3, linear 1x1 projection, with an identity
/// skip when input and output widths agree.
#[derive(Clone, Debug)]
pub struct InvertedResidualBlock {
    pub expand: Option<(Conv2d, BatchNorm)>,
    pub depthwise: DepthwiseConv2d,
    pub depthwise_bn: BatchNorm,
    pub project: Conv2d,
    pub project_bn: BatchNorm,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl InvertedResidualBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, spec: &BlockSpec, in_ch: usize) -> Result<Self> {
        let out_ch = spec.output_channels(in_ch)?;
        let hidden = in_ch * spec.expansion;
        let expand = (spec.expansion > 1).then(|| {
            (
                Conv2d::new(reg, &format!("{name}.expand"), in_ch, hidden, 1, 1, false),
                BatchNorm::new(reg, &format!("{name}.expand_bn"), hidden),
            )
        });
        Ok(InvertedResidualBlock {
            expand,
            depthwise: DepthwiseConv2d::new(reg, &format!("{name}.depthwise"), hidden, 3, 1),
            depthwise_bn: BatchNorm::new(reg, &format!("{name}.depthwise_bn"), hidden),
            project: Conv2d::new(reg, &format!("{name}.project"), hidden, out_ch, 1, 1, false),
            project_bn: BatchNorm::new(reg, &format!("{name}.project_bn"), out_ch),
            in_ch,
            out_ch,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.in_ch == self.out_ch && self.depthwise.stride == 1
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(s, h)?;
            h = bn.forward(s, h)?;
            h = s.tape.relu(h);
        }
        h = self.depthwise.forward(s, h)?;
        h = self.depthwise_bn.forward(s, h)?;
        h = s.tape.relu(h);
        h = self.project.forward(s, h)?;
        h = self.project_bn.forward(s, h)?;
        if self.has_skip() {
            h = s.tape.add(x, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Residual(ResidualBlock),
    Dense(DenseBlock),
    Dpdb(DpdbBlock),
    InvertedResidual(InvertedResidualBlock),
}

impl Block {
    pub fn build(reg: &mut ParamRegistry, name: &str, spec: &BlockSpec, in_ch: usize) -> Result<Self> {
        Ok(match spec.kind {
            BlockKind::Residual => Block::Residual(ResidualBlock::new(reg, name, spec, in_ch)?),
            BlockKind::Dense => Block::Dense(DenseBlock::new(reg, name, spec, in_ch)?),
            BlockKind::Dpdb => Block::Dpdb(DpdbBlock::new(reg, name, spec, in_ch)?),
            BlockKind::InvertedResidual => Block::InvertedResidual(InvertedResidualBlock::new(reg, name, spec, in_ch)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Residual(_) => BlockKind::Residual,
            Block::Dense(_) => BlockKind::Dense,
            Block::Dpdb(_) => BlockKind::Dpdb,
            Block::InvertedResidual(_) => BlockKind::InvertedResidual,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Residual(b) => b.width,
            Block::Dense(b) => b.out_channels(),
            Block::Dpdb(b) => b.out_ch,
            Block::InvertedResidual(b) => b.out_ch,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Residual(b) => b.forward(s, x),
            Block::Dense(b) => b.forward(s, x),
            Block::Dpdb(b) => b.forward(s, x),
            Block::InvertedResidual(b) => b.forward(s, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::tensor::{Shape4, Tensor4};
    use rand::SeedableRng;

    fn input(c: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor4::randn(Shape4::new(2, c, 6, 6), 1.0, &mut rng)
    }

    #[test]
    fn dense_channel_arithmetic() {
        let spec = BlockSpec::dense(4, 3);
        assert_eq!(spec.output_channels(8).unwrap(), 20);
        let mut reg = ParamRegistry::new();
        let block = Block::build(&mut reg, "d", &spec, 8).unwrap();
        let mut store = reg.init::<f64>(1);
        let mut s = Session::new(&mut store, Mode::Train, 0);
        let x = s.input(input(8, 1));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y).c, 20);
    }

    #[test]
    fn dense_single_layer_is_input_plus_one_composite() {
        let spec = BlockSpec::dense(5, 1);
        let mut reg = ParamRegistry::new();
        let Block::Dense(block) = Block::build(&mut reg, "d", &spec, 3).unwrap() else {
            unreachable!()
        };
        let mut store = reg.init::<f64>(2);
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let x = s.input(input(3, 2));
        let y = block.forward(&mut s, x).unwrap();
        let composite = block.layers[0].forward(&mut s, x).unwrap();
        let head = s.tape.value(y).slice_channels(0, 3).unwrap();
        let tail = s.tape.value(y).slice_channels(3, 5).unwrap();
        assert_eq!(&head, s.tape.value(x));
        assert_eq!(&tail, s.tape.value(composite));
    }

    #[test]
    fn dpdb_channel_arithmetic() {
        let spec = BlockSpec::dpdb(8, 4, 3, Some(16));
        let mut reg = ParamRegistry::new();
        let Block::Dpdb(block) = Block::build(&mut reg, "p", &spec, 8).unwrap() else {
            unreachable!()
        };
        assert_eq!(block.fused_channels(), 20);
        let mut store = reg.init::<f64>(3);
        let mut s = Session::new(&mut store, Mode::Train, 0);
        let x = s.input(input(8, 3));
        let paths = block.forward_paths(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(paths.fused).c, 20);
        assert_eq!(s.tape.shape(paths.output).c, 16);
        assert_eq!(s.tape.shape(paths.residual).c, 8);
        assert_eq!(s.tape.shape(paths.dense.unwrap()).c, 12);
    }

    #[test]
    fn dpdb_rejects_narrow_input() {
        let spec = BlockSpec::dpdb(8, 4, 2, None);
        assert!(spec.output_channels(6).is_err());
        let mut reg = ParamRegistry::new();
        assert!(Block::build(&mut reg, "p", &spec, 6).is_err());
    }

    #[test]
    fn residual_with_zero_transform_is_identity() {
        let spec = BlockSpec::residual(4, 2);
        let mut reg = ParamRegistry::new();
        let block = Block::build(&mut reg, "r", &spec, 4).unwrap();
        let mut store = reg.init::<f64>(4);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("conv.weight") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut s = Session::new(&mut store, Mode::Train, 0);
        let x = s.input(input(4, 4));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y), s.tape.value(x));
    }

    #[test]
    fn residual_rejects_width_mismatch() {
        let spec = BlockSpec::residual(4, 2);
        assert!(matches!(
            spec.output_channels(5),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn inverted_residual_boundary_case() {
        let spec = BlockSpec::inverted_residual(1, 6);
        let mut reg = ParamRegistry::new();
        let Block::InvertedResidual(block) = Block::build(&mut reg, "i", &spec, 6).unwrap() else {
            unreachable!()
        };
        assert!(block.expand.is_none());
        assert!(block.has_skip());
        let spec = BlockSpec::inverted_residual(3, 5);
        let mut reg = ParamRegistry::new();
        let block = Block::build(&mut reg, "i", &spec, 6).unwrap();
        assert_eq!(block.out_channels(), 5);
        let mut store = reg.init::<f64>(5);
        let mut s = Session::new(&mut store, Mode::Train, 0);
        let x = s.input(input(6, 5));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y).c, 5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(BlockSpec::dense(0, 2).validate().is_err());
        assert!(BlockSpec::inverted_residual(0, 4).validate().is_err());
        assert!(BlockSpec::dense(2, 2).with_dropout(1.0).validate().is_err());
    }
}
