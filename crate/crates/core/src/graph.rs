//! The DD-Net computation graph: macro encoder, stacked decoder units, the
//! three skip families and the supervision heads.
//!
//! [`Graph::build`] turns an [`ArchSpec`] into a topologically ordered node
//! list. Each node owns the parameters registered under its name, so the
//! same list drives the forward pass, parameter counting and export.

use serde::{Deserialize, Serialize};

use crate::archspec::{ArchSpec, UpsampleBlock};
use crate::autodiff::Var;
use crate::blocks::{Block, BlockSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, BnActConv, Conv2d, ConvTranspose2d};
use crate::params::{ParamId, ParamRegistry, ParamStore};
use crate::real::Real;
use crate::session::Session;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Data,
    Forward,
    Backward,
    StackedResidual,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Data => "data",
            EdgeKind::Forward => "forward",
            EdgeKind::Backward => "backward",
            EdgeKind::StackedResidual => "stacked_residual",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: NodeId,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug)]
pub enum NodeOp {
    Input,
    Conv(Conv2d),
    BnActConv(BnActConv),
    ConvTranspose(ConvTranspose2d),
    Block(Block),
    MaxPool { window: usize },
    Concat,
    /// Element-wise sum of all inputs; the identity with a single input.
    Join,
    Head { conv: Conv2d, main: bool },
}

impl NodeOp {
    pub fn kind(&self) -> String {
        match self {
            NodeOp::Input => "input".into(),
            NodeOp::Conv(c) => format!("conv{}x{}", c.kernel, c.kernel),
            NodeOp::BnActConv(c) => format!("bn_elu_conv{}x{}", c.conv.kernel, c.conv.kernel),
            NodeOp::ConvTranspose(c) => format!("conv_transpose{}x{}", c.kernel, c.kernel),
            NodeOp::Block(b) => format!("block_{}", b.kind().as_str()),
            NodeOp::MaxPool { window } => format!("max_pool{window}"),
            NodeOp::Concat => "concat".into(),
            NodeOp::Join => "sum".into(),
            NodeOp::Head { main: true, .. } => "main_head".into(),
            NodeOp::Head { main: false, .. } => "aux_head".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    /// Grouping used by the per-module parameter breakdown.
    pub module: String,
    pub op: NodeOp,
    pub inputs: Vec<Edge>,
    pub channels: usize,
    /// Spatial size at the reference input resolution.
    pub height: usize,
    pub width: usize,
    pub params: Vec<ParamId>,
}

/// Logits of every head for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub main: Var,
    /// One per decoder unit except the last, in unit order.
    pub aux: Vec<Var>,
}

impl HeadOutputs {
    pub fn len(&self) -> usize {
        1 + self.aux.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    spec: ArchSpec,
    nodes: Vec<Node>,
    registry: ParamRegistry,
    main_head: NodeId,
    aux_heads: Vec<NodeId>,
}

struct Builder {
    reg: ParamRegistry,
    nodes: Vec<Node>,
}

impl Builder {
    fn ch(&self, id: NodeId) -> usize {
        self.nodes[id.0].channels
    }

    fn res(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.height, n.width)
    }

    /// Appends a node whose parameters are registered by `make`.
    fn add(
        &mut self,
        name: String,
        module: &str,
        inputs: Vec<Edge>,
        res: (usize, usize),
        make: impl FnOnce(&mut ParamRegistry, &str) -> Result<(NodeOp, usize)>,
    ) -> Result<NodeId> {
        let first = self.reg.len();
        let (op, channels) = make(&mut self.reg, &name)?;
        let params = (first..self.reg.len()).map(ParamId).collect();
        self.nodes.push(Node {
            name,
            module: module.to_string(),
            op,
            inputs,
            channels,
            height: res.0,
            width: res.1,
            params,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn data(from: NodeId) -> Edge {
        Edge {
            from,
            kind: EdgeKind::Data,
        }
    }

    fn pool(&mut self, name: String, module: &str, x: NodeId, window: usize) -> Result<NodeId> {
        let (h, w) = self.res(x);
        let ch = self.ch(x);
        self.add(name, module, vec![Self::data(x)], (h / window, w / window), |_, _| {
            Ok((NodeOp::MaxPool { window }, ch))
        })
    }

    /// A sum junction of `base` with `extra`, projecting `extra` with a 1x1
    /// convolution when widths differ. The edge leaving `extra` carries
    /// `kind`.
    #[allow(clippy::too_many_arguments)]
    fn junction(
        &mut self,
        name: String,
        module: &str,
        base: NodeId,
        extra: Option<(NodeId, EdgeKind)>,
        projection: bool,
    ) -> Result<NodeId> {
        let ch = self.ch(base);
        let res = self.res(base);
        let mut inputs = vec![Self::data(base)];
        if let Some((src, kind)) = extra {
            if self.res(src) != res {
                return Err(Error::Arch(format!(
                    "{name}: {} skip arrives at {:?} but the junction is at {:?}",
                    kind.as_str(),
                    self.res(src),
                    res
                )));
            }
            let src_ch = self.ch(src);
            if src_ch == ch {
                inputs.push(Edge { from: src, kind });
            } else if projection {
                let p = self.add(format!("{name}.proj"), module, vec![Edge { from: src, kind }], res, |reg, n| {
                    Ok((NodeOp::Conv(Conv2d::new(reg, n, src_ch, ch, 1, 1, false)), ch))
                })?;
                inputs.push(Self::data(p));
            } else {
                return Err(Error::Arch(format!(
                    "{name}: {} skip has {src_ch} channels but the junction has {ch} and projection is disabled",
                    kind.as_str()
                )));
            }
        }
        self.add(name, module, inputs, res, |_, _| Ok((NodeOp::Join, ch)))
    }
}

impl Graph {
    pub fn build(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            reg: ParamRegistry::new(),
            nodes: Vec::new(),
        };
        let (in_c, in_h, in_w) = spec.input;
        let dropout = spec.dropout;

        let input = b.add("input".into(), "input", vec![], (in_h, in_w), |_, _| Ok((NodeOp::Input, in_c)))?;
        let stem_w = spec.stem_width;
        let mut x = b.add("encoder.stem".into(), "encoder.stem", vec![Builder::data(input)], (in_h, in_w), |reg, n| {
            Ok((NodeOp::Conv(Conv2d::new(reg, n, in_c, stem_w, 3, 1, false)), stem_w))
        })?;

        // Macro encoder; the pre-pool output of each stage feeds a forward skip.
        let mut levels = Vec::new();
        for (k, stage) in spec.encoder.iter().enumerate() {
            let module = format!("encoder.stage{}", k + 1);
            let in_ch = b.ch(x);
            let res = b.res(x);
            let block_spec = stage.block.clone().with_dropout(dropout);
            let blk = b.add(format!("{module}.block"), &module, vec![Builder::data(x)], res, |reg, n| {
                let blk = Block::build(reg, n, &block_spec, in_ch)?;
                let out = blk.out_channels();
                Ok((NodeOp::Block(blk), out))
            })?;
            levels.push(blk);
            x = b.pool(format!("{module}.pool"), &module, blk, stage.downsample)?;
        }
        let bottleneck = x;

        // Reduced forward-skip features, computed once and shared by every
        // decoder. Decoder stage j meets encoder level 2 - j.
        let skip_widths = spec.skip_widths();
        let mut reduced = Vec::new();
        for j in 0..3 {
            let src = levels[2 - j];
            let src_ch = b.ch(src);
            let out = skip_widths[j];
            let res = b.res(src);
            let id = b.add(format!("skips.forward{}", j + 1), "skips.forward", vec![Builder::data(src)], res, |reg, n| {
                Ok((NodeOp::Conv(Conv2d::new(reg, n, src_ch, out, 1, 1, false)), out))
            })?;
            reduced.push(id);
        }

        let inner_widths = spec.inner_widths()?;
        let mut unit_in = bottleneck;
        let mut prev: Option<(NodeId, Vec<NodeId>)> = None;
        let mut aux_heads = Vec::new();
        let mut main_head = None;
        for u in 1..=spec.decoder_units {
            // Inner encoder for units after the first, fed by the previous
            // unit's (possibly fused) full-resolution output.
            let mut z = unit_in;
            if let Some((_, prev_stages)) = &prev {
                for k in 0..3 {
                    let module = format!("unit{u}.encoder.stage{}", k + 1);
                    let res = b.res(z);
                    let in_ch = b.ch(z);
                    let dense = BlockSpec::dense(spec.inner_growth, spec.inner_layers).with_dropout(dropout);
                    let blk = b.add(format!("{module}.block"), &module, vec![Builder::data(z)], res, |reg, n| {
                        let blk = Block::build(reg, n, &dense, in_ch)?;
                        let out = blk.out_channels();
                        Ok((NodeOp::Block(blk), out))
                    })?;
                    let blk_ch = b.ch(blk);
                    let tw = inner_widths[k];
                    let trans = b.add(format!("{module}.transition"), &module, vec![Builder::data(blk)], res, |reg, n| {
                        Ok((NodeOp::BnActConv(BnActConv::new(reg, n, blk_ch, tw, 1, Activation::Elu, false)), tw))
                    })?;
                    let back = spec.skips.backward.then(|| (prev_stages[2 - k], EdgeKind::Backward));
                    let join = b.junction(format!("{module}.join"), &format!("unit{u}.skips.backward"), trans, back, spec.projection)?;
                    z = b.pool(format!("{module}.pool"), &module, join, spec.encoder[k].downsample)?;
                }
            }

            // Decoder: three upsampling stages.
            let mut stage_outs = Vec::new();
            for j in 0..3 {
                let module = format!("unit{u}.decoder.stage{}", j + 1);
                let f = spec.upsample_factors[j];
                let (h, w) = b.res(z);
                let res = (h * f, w * f);
                let in_ch = b.ch(z);
                let width = spec.decoder_widths[j];
                let up = b.add(format!("{module}.up"), &module, vec![Builder::data(z)], res, |reg, n| {
                    Ok((NodeOp::ConvTranspose(ConvTranspose2d::new(reg, n, in_ch, width, f, f, false)), width))
                })?;
                if b.res(reduced[j]) != res {
                    return Err(Error::Arch(format!(
                        "{module}: forward skip at {:?} does not match decoder resolution {:?}",
                        b.res(reduced[j]),
                        res
                    )));
                }
                let cat_ch = width + b.ch(reduced[j]);
                let cat = b.add(
                    format!("{module}.concat"),
                    &module,
                    vec![
                        Builder::data(up),
                        Edge {
                            from: reduced[j],
                            kind: EdgeKind::Forward,
                        },
                    ],
                    res,
                    |_, _| Ok((NodeOp::Concat, cat_ch)),
                )?;
                let feat = match spec.upsample_block {
                    UpsampleBlock::None => cat,
                    UpsampleBlock::Conv => b.add(format!("{module}.conv"), &module, vec![Builder::data(cat)], res, |reg, n| {
                        Ok((NodeOp::BnActConv(BnActConv::new(reg, n, cat_ch, width, 3, Activation::Elu, false)), width))
                    })?,
                    UpsampleBlock::Dense => {
                        let dense = BlockSpec::dense(spec.dense_growth, spec.dense_layers).with_dropout(dropout);
                        b.add(format!("{module}.block"), &module, vec![Builder::data(cat)], res, |reg, n| {
                            let blk = Block::build(reg, n, &dense, cat_ch)?;
                            let out = blk.out_channels();
                            Ok((NodeOp::Block(blk), out))
                        })?
                    }
                };
                stage_outs.push(feat);
                z = feat;
            }
            let f_u = z;
            let last = u == spec.decoder_units;
            let classes = spec.num_classes;
            if spec.supervision && !last {
                let ch = b.ch(f_u);
                let res = b.res(f_u);
                let head = b.add(format!("heads.aux{u}"), "heads", vec![Builder::data(f_u)], res, |reg, n| {
                    let conv = Conv2d::new(reg, n, ch, classes, 1, 1, true);
                    Ok((NodeOp::Head { conv, main: false }, classes))
                })?;
                aux_heads.push(head);
            }
            let src = match &prev {
                Some((prev_f, _)) if spec.skips.stacked_residual => Some((*prev_f, EdgeKind::StackedResidual)),
                _ => None,
            };
            let fused = b.junction(format!("unit{u}.out"), &format!("unit{u}.skips.stacked"), f_u, src, spec.projection)?;
            if last {
                let ch = b.ch(fused);
                let res = b.res(fused);
                main_head = Some(b.add("heads.main".into(), "heads", vec![Builder::data(fused)], res, |reg, n| {
                    let conv = Conv2d::new(reg, n, ch, classes, 1, 1, true);
                    Ok((NodeOp::Head { conv, main: true }, classes))
                })?);
            }
            unit_in = fused;
            prev = Some((f_u, stage_outs));
        }

        let graph = Graph {
            spec: spec.clone(),
            nodes: b.nodes,
            registry: b.reg,
            main_head: main_head.expect("at least one unit"),
            aux_heads,
        };
        for &h in graph.heads().iter() {
            let n = &graph.nodes[h.0];
            debug_assert_eq!((n.height, n.width), (in_h, in_w));
        }
        Ok(graph)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    /// Aux heads in unit order, then the main head.
    pub fn heads(&self) -> Vec<NodeId> {
        let mut v = self.aux_heads.clone();
        v.push(self.main_head);
        v
    }

    pub fn head_count(&self) -> usize {
        self.aux_heads.len() + 1
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.registry.init(seed)
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.registry.param_count()
    }

    /// Trainable scalars per module, in first-appearance order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for node in &self.nodes {
            let count: usize = node
                .params
                .iter()
                .map(|&id| self.registry.decl(id))
                .filter(|d| d.trainable)
                .map(|d| d.shape.numel())
                .sum();
            if count == 0 {
                continue;
            }
            match out.iter_mut().find(|(m, _)| *m == node.module) {
                Some((_, c)) => *c += count,
                None => out.push((node.module.clone(), count)),
            }
        }
        out
    }

    /// Runs every node on `x`. Parameters are read through `s`, which must
    /// wrap a store initialised from this graph's registry.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<HeadOutputs> {
        let shape = s.tape.shape(x);
        let (in_c, _, _) = self.spec.input;
        let factor = self.spec.total_downsample();
        if shape.c != in_c || shape.n == 0 || shape.h == 0 || shape.w == 0 || shape.h % factor != 0 || shape.w % factor != 0 {
            return Err(Error::invalid(format!(
                "input {shape} does not fit the graph: need {in_c} channels and spatial dims divisible by {factor}"
            )));
        }
        if s.store().len() != self.registry.len() {
            return Err(Error::invalid("parameter store does not belong to this graph"));
        }
        let mut values: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let arg = |k: usize| values[node.inputs[k].from.0].expect("topological order");
            let out = match &node.op {
                NodeOp::Input => x,
                NodeOp::Conv(c) => c.forward(s, arg(0))?,
                NodeOp::BnActConv(c) => c.forward(s, arg(0))?,
                NodeOp::ConvTranspose(c) => c.forward(s, arg(0))?,
                NodeOp::Block(blk) => blk.forward(s, arg(0))?,
                NodeOp::MaxPool { window } => s.tape.max_pool(arg(0), *window, *window)?,
                NodeOp::Concat => {
                    let xs: Vec<Var> = (0..node.inputs.len()).map(arg).collect();
                    s.tape.concat_channels(&xs)?
                }
                NodeOp::Join => {
                    let mut acc = arg(0);
                    for k in 1..node.inputs.len() {
                        acc = s.tape.add(acc, arg(k))?;
                    }
                    acc
                }
                NodeOp::Head { conv, .. } => conv.forward(s, arg(0))?,
            };
            values[i] = Some(out);
        }
        let get = |id: NodeId| values[id.0].expect("all nodes evaluated");
        Ok(HeadOutputs {
            main: get(self.main_head),
            aux: self.aux_heads.iter().map(|&h| get(h)).collect(),
        })
    }

    pub fn export(&self) -> GraphExport {
        GraphExport {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| ExportNode {
                    id: i,
                    name: n.name.clone(),
                    op: n.op.kind(),
                    module: n.module.clone(),
                    shape: [n.channels, n.height, n.width],
                    params: n
                        .params
                        .iter()
                        .map(|&id| self.registry.decl(id))
                        .filter(|d| d.trainable)
                        .map(|d| d.shape.numel())
                        .sum(),
                })
                .collect(),
            edges: self
                .nodes
                .iter()
                .enumerate()
                .flat_map(|(to, n)| {
                    n.inputs.iter().map(move |e| ExportEdge {
                        from: e.from.0,
                        to,
                        kind: e.kind,
                    })
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("export serialises")
    }

    pub fn to_dot(&self) -> String {
        self.export().to_dot()
    }
}

/// Serializable node/edge view of a [`Graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: usize,
    pub name: String,
    pub op: String,
    pub module: String,
    /// `[channels, height, width]` at the reference input size.
    pub shape: [usize; 3],
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

impl GraphExport {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("graph json: {e}")))
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph ddnet {\n  rankdir=TB;\n  node [shape=box, fontsize=10];\n");
        for n in &self.nodes {
            let [c, h, w] = n.shape;
            out.push_str(&format!(
                "  n{} [label=\"{}\\n{}\\n{}x{}x{}\"];\n",
                n.id, n.name, n.op, c, h, w
            ));
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Data => String::new(),
                EdgeKind::Forward => " [label=\"forward\", color=blue]".into(),
                EdgeKind::Backward => " [label=\"backward\", color=red, style=dashed]".into(),
                EdgeKind::StackedResidual => " [label=\"stacked_residual\", color=darkgreen, style=bold]".into(),
            };
            out.push_str(&format!("  n{} -> n{}{};\n", e.from, e.to, style));
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::SkipSet;

    #[test]
    fn head_count_follows_depth_and_supervision() {
        for d in 1..=3 {
            let g = Graph::build(&ArchSpec::tiny().with_depth(d)).unwrap();
            assert_eq!(g.head_count(), d);
            let mut spec = ArchSpec::tiny().with_depth(d);
            spec.supervision = false;
            assert_eq!(Graph::build(&spec).unwrap().head_count(), 1);
        }
    }

    #[test]
    fn projection_off_rejects_width_mismatch() {
        let mut spec = ArchSpec::tiny().with_depth(2).with_skips(SkipSet::FB);
        spec.projection = false;
        let err = Graph::build(&spec).unwrap_err();
        assert!(err.to_string().contains("projection is disabled"), "{err}");
    }

    #[test]
    fn breakdown_sums_to_total() {
        let g = Graph::build(&ArchSpec::tiny().with_depth(3)).unwrap();
        let total: usize = g.param_breakdown().iter().map(|(_, c)| c).sum();
        assert_eq!(total, g.param_count());
    }
}
