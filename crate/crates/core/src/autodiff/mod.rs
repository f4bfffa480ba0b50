//! Reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] owns every value produced during a forward pass together with
//! the rule needed to push gradients back through it. Operations are methods
//! on the tape that take and return [`Var`] handles; nodes are appended in
//! execution order, so the node list is always topologically sorted.

mod conv;
mod ops;

pub use conv::{ConvGeom, Padding};
pub use ops::RunningStats;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape4, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` describes the forward convolution that maps the output shape
    /// back onto the input shape.
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Elu {
        x: Var,
        alpha: T,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        coeffs: Vec<T>,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    PixelLoss {
        logits: Var,
        dlogits: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Recorded computation for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a differentiable input.
    pub fn variable(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last differentiated loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor4<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of every
    /// differentiable node that `loss` depends on. A tape can be
    /// differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, gv) in contributions {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose_backward(*x, *w, *b, geom, g)
            }
            Op::Depthwise { x, w, b, geom } => self.depthwise_backward(*x, *w, *b, geom, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, *batch_stats, g),
            Op::Elu { x, alpha } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| {
                        if xi > T::zero() {
                            gi
                        } else {
                            gi * *alpha * xi.exp()
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
                vec![(*x, dx)]
            }
            Op::Concat { xs } => self.concat_backward(xs, node.value.shape(), g),
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let os = node.value.shape();
                let plane = xs.plane();
                let mut dx = vec![T::zero(); xs.numel()];
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * plane;
                    let src = n * os.c * plane;
                    dx[dst..dst + os.c * plane].copy_from_slice(&g[src..src + os.c * plane]);
                }
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&gi| gi * *factor).collect())],
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Dot { x, coeffs } => vec![(*x, coeffs.iter().map(|&c| c * g[0]).collect())],
            Op::Mask { x, mask } => vec![(*x, mask.iter().zip(g).map(|(&m, &gi)| m * gi).collect())],
            Op::Softmax { x } => self.softmax_backward(*x, &node.value, g),
            Op::LogSoftmax { x } => self.log_softmax_backward(*x, &node.value, g),
            Op::PixelLoss { logits, dlogits } => {
                vec![(*logits, dlogits.iter().map(|&d| d * g[0]).collect())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor4::full(Shape4::new(1, 2, 2, 2), 0.3));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor4::full(Shape4::new(1, 1, 2, 2), 1.5));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor4::full(Shape4::new(1, 1, 1, 2), 1.0));
        let x = tape.variable(Tensor4::full(Shape4::new(1, 1, 1, 2), 2.0));
        let y = tape.add(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }
}
