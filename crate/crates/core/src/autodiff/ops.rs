use rand::Rng;

use super::{Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape4, Tensor4};

/// Running per-channel statistics owned by a batch-norm layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> Tape<T> {
    /// Batch normalisation over `N x H x W` per channel.
    ///
    /// In [`Mode::Train`] the batch statistics normalise the input and are
    /// blended into `stats` as `momentum * old + (1 - momentum) * batch`
    /// (variance unbiased). In [`Mode::Eval`] the stored statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: RunningStats<'_, T>,
    ) -> Result<Var> {
        let s = self.shape(x);
        for p in [gamma, beta] {
            let n = self.value(p).numel();
            if n != s.c {
                return Err(Error::ChannelMismatch {
                    op: "batch_norm",
                    expected: s.c,
                    found: n,
                });
            }
        }
        if stats.mean.len() != s.c || stats.var.len() != s.c {
            return Err(Error::invalid("batch_norm: running statistics have wrong length"));
        }
        let m = s.n * s.plane();
        if m == 0 {
            return Err(Error::EmptyInput("batch_norm"));
        }
        let eps = T::from_f64_lossy(stats.eps);
        let plane = s.plane();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut inv_std = vec![T::zero(); s.c];
        let batch_stats = mode == Mode::Train;
        for c in 0..s.c {
            let (mean, var) = if batch_stats {
                let mut sum = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    sum += xv[base..base + plane].iter().copied().sum::<T>();
                }
                let mean = sum / T::from_usize(m).unwrap();
                let mut sq = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for &v in &xv[base..base + plane] {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq / T::from_usize(m).unwrap();
                let keep = T::from_f64_lossy(stats.momentum);
                let unbiased = if m > 1 {
                    sq / T::from_usize(m - 1).unwrap()
                } else {
                    var
                };
                stats.mean[c] = keep * stats.mean[c] + (T::one() - keep) * mean;
                stats.var[c] = keep * stats.var[c] + (T::one() - keep) * unbiased;
                (mean, var)
            } else {
                (stats.mean[c], stats.var[c])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    xhat[i] = (xv[i] - mean) * is;
                }
            }
        }
        let mut y = vec![T::zero(); s.numel()];
        for (i, (yi, &xh)) in y.iter_mut().zip(&xhat).enumerate() {
            let c = (i / plane) % s.c;
            *yi = gv[c] * xh + bv[c];
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor4::from_vec(s, y)?;
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        batch_stats: bool,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let s = self.shape(x);
        let plane = s.plane();
        let m = T::from_usize(s.n * plane).unwrap();
        let gv = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); s.c];
        let mut dbeta = vec![T::zero(); s.c];
        for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
            let c = (i / plane) % s.c;
            dgamma[c] += gi * xh;
            dbeta[c] += gi;
        }
        let mut dx = vec![T::zero(); s.numel()];
        for (i, d) in dx.iter_mut().enumerate() {
            let c = (i / plane) % s.c;
            *d = if batch_stats {
                // dxhat = g * gamma; dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                gv[c] * inv_std[c] / m * (m * g[i] - dbeta[c] - xhat[i] * dgamma[c])
            } else {
                g[i] * gv[c] * inv_std[c]
            };
        }
        vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
    }

    /// Exponential linear unit: `x` for `x > 0`, `alpha * (exp(x) - 1)` otherwise.
    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::from_f64_lossy(alpha);
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { a * v.exp_m1() })
            .collect();
        let value = Tensor4::from_vec(src.shape(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Elu { x, alpha: a })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor4::from_vec(src.shape(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Relu { x })
    }

    /// Max pooling without padding. Ties route the gradient to the first
    /// maximal element in row-major window order.
    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if window == 0 || stride == 0 {
            return Err(Error::invalid("max_pool window and stride must be positive"));
        }
        if window > s.h || window > s.w {
            return Err(Error::invalid(format!(
                "max_pool window {window} exceeds spatial size {}x{}",
                s.h, s.w
            )));
        }
        let oh = (s.h - window) / stride + 1;
        let ow = (s.w - window) / stride + 1;
        let out_shape = Shape4::new(s.n, s.c, oh, ow);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(out_shape.numel());
        let mut argmax = Vec::with_capacity(out_shape.numel());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * s.w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = base + (oy * stride + ky) * s.w + ox * stride + kx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires_grad(x);
        let value = Tensor4::from_vec(out_shape, y)?;
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyInput("concat_channels"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: s0,
                    rhs: s,
                });
            }
            channels += s.c;
        }
        let out_shape = Shape4::new(s0.n, channels, s0.h, s0.w);
        let mut y = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &v in xs {
                let t = self.value(v);
                let item = t.shape().item();
                y.extend_from_slice(&t.data()[n * item..(n + 1) * item]);
            }
        }
        let rg = self.any_grad(xs);
        let value = Tensor4::from_vec(out_shape, y)?;
        Ok(self.push(value, rg, Op::Concat { xs: xs.to_vec() }))
    }

    pub(super) fn concat_backward(&self, xs: &[Var], out: Shape4, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut grads: Vec<Vec<T>> = xs
            .iter()
            .map(|&v| Vec::with_capacity(self.value(v).numel()))
            .collect();
        let mut offset = 0;
        for _ in 0..out.n {
            for (k, &v) in xs.iter().enumerate() {
                let item = self.shape(v).item();
                grads[k].extend_from_slice(&g[offset..offset + item]);
                offset += item;
            }
        }
        xs.iter().copied().zip(grads).collect()
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let value = Tensor4::from_vec(sa, data)?;
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * f).collect();
        let value = Tensor4::from_vec(src.shape(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Scale { x, factor: f })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor4::scalar(total), rg, Op::Sum { x })
    }

    /// `sum_i x_i * coeffs_i`, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &Tensor4<T>) -> Result<Var> {
        let s = self.shape(x);
        if s != coeffs.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: s,
                rhs: coeffs.shape(),
            });
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor4::scalar(total),
            rg,
            Op::Dot {
                x,
                coeffs: coeffs.data().to_vec(),
            },
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} must be in [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let src = self.value(x);
        let mask: Vec<T> = (0..src.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor4::from_vec(src.shape(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Mask { x, mask }))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let value = softmax_values(self.value(x), false);
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::Softmax { x })
    }

    pub fn log_softmax_channels(&mut self, x: Var) -> Var {
        let value = softmax_values(self.value(x), true);
        let rg = self.requires_grad(x);
        self.push(value, rg, Op::LogSoftmax { x })
    }

    pub(super) fn softmax_backward(&self, x: Var, y: &Tensor4<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let s = y.shape();
        let plane = s.plane();
        let yv = y.data();
        let mut dx = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let dot = (0..s.c).map(|c| g[idx(c)] * yv[idx(c)]).sum::<T>();
                for c in 0..s.c {
                    dx[idx(c)] = yv[idx(c)] * (g[idx(c)] - dot);
                }
            }
        }
        vec![(x, dx)]
    }

    pub(super) fn log_softmax_backward(&self, x: Var, y: &Tensor4<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let s = y.shape();
        let plane = s.plane();
        let yv = y.data();
        let mut dx = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let total = (0..s.c).map(|c| g[idx(c)]).sum::<T>();
                for c in 0..s.c {
                    dx[idx(c)] = g[idx(c)] - yv[idx(c)].exp() * total;
                }
            }
        }
        vec![(x, dx)]
    }

    /// Mean over contributing pixels of `-w (1 - p_t)^gamma log p_t`, where
    /// `p_t` is the channel softmax of `logits` at the target class.
    ///
    /// `targets` and `weights` are indexed by `(n, h, w)`; `None` targets do
    /// not contribute to either sum or count. `log p_t` is floored at
    /// `ln(1e-12)`.
    pub fn focal_nll(&mut self, logits: Var, targets: &[Option<usize>], weights: &[T], gamma: f64) -> Result<Var> {
        let s = self.shape(logits);
        let plane = s.plane();
        if targets.len() != s.n * plane || weights.len() != targets.len() {
            return Err(Error::invalid(format!(
                "focal_nll: {} targets / {} weights for logits {s}",
                targets.len(),
                weights.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        let logp = softmax_values(self.value(logits), true);
        let lv = logp.data();
        let floor = T::from_f64_lossy(1e-12f64.ln());
        let g = T::from_f64_lossy(gamma);
        let mut dlogits = vec![T::zero(); s.numel()];
        let mut total = T::zero();
        if count > 0 {
            let inv_count = T::one() / T::from_usize(count).unwrap();
            for (pix, (target, &w)) in targets.iter().zip(weights).enumerate() {
                let Some(t) = *target else { continue };
                if t >= s.c {
                    return Err(Error::LabelOutOfRange {
                        label: t,
                        classes: s.c,
                    });
                }
                let (n, p) = (pix / plane, pix % plane);
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let raw = lv[idx(t)];
                let clamped = raw < floor;
                let lp = if clamped { floor } else { raw };
                let pt = lp.exp();
                let one_minus = T::one() - pt;
                // (1 - p)^gamma via exp(gamma * ln(1 - p)).
                let modulator = if gamma == 0.0 {
                    T::one()
                } else if one_minus <= T::zero() {
                    T::zero()
                } else {
                    (g * (-pt).ln_1p()).exp()
                };
                total += -w * modulator * lp;
                if clamped {
                    continue;
                }
                // d loss / d log p_t
                let slope = if gamma == 0.0 || one_minus <= T::zero() {
                    -w * modulator
                } else {
                    -w * (modulator - g * modulator / one_minus * pt * lp)
                };
                let scale = slope * inv_count;
                for c in 0..s.c {
                    let kron = if c == t { T::one() } else { T::zero() };
                    dlogits[idx(c)] = scale * (kron - lv[idx(c)].exp());
                }
            }
            total *= inv_count;
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor4::scalar(total), rg, Op::PixelLoss { logits, dlogits }))
    }
}

pub(crate) fn softmax_values<T: Real>(x: &Tensor4<T>, log: bool) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let xv = x.data();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let max = (0..s.c).map(|c| xv[idx(c)]).fold(T::neg_infinity(), T::max);
            let denom = (0..s.c).map(|c| (xv[idx(c)] - max).exp()).sum::<T>();
            let log_denom = denom.ln();
            for c in 0..s.c {
                let z = xv[idx(c)] - max;
                out[idx(c)] = if log { z - log_denom } else { z.exp() / denom };
            }
        }
    }
    Tensor4::from_vec(s, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, data: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape4::new(1, 1, 1, 3), &[0.0, 1.0, -1.0]));
        let y = tape.elu(x, 1.0);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v[2] + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn max_pool_picks_max_and_first_tie() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(Shape4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.variable(t(Shape4::new(1, 1, 2, 2), &[5.0; 4]));
        let yc = tape.max_pool(c, 2, 2).unwrap();
        let s = tape.sum(yc);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_oversized_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        assert!(tape.max_pool(x, 3, 1).is_err());
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::full(Shape4::new(1, 2, 4, 4), 0.7));
        let y = tape.max_pool(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn concat_counts_channels_and_checks_spatial() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor4::zeros(Shape4::new(2, 3, 4, 4)));
        let b = tape.constant(Tensor4::zeros(Shape4::new(2, 5, 4, 4)));
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(y).c, 8);
        assert_eq!(tape.concat_channels(&[a]).unwrap(), a);
        let bad = tape.constant(Tensor4::zeros(Shape4::new(2, 5, 3, 4)));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn add_checks_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor4::zeros(Shape4::new(1, 1, 2, 2)));
        let b = tape.constant(Tensor4::zeros(Shape4::new(1, 2, 2, 2)));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::full(Shape4::new(1, 1, 2, 2), 2.0));
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn batch_norm_zero_variance_and_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::full(Shape4::new(2, 1, 2, 2), 3.0));
        let g = tape.constant(Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0));
        let b = tape.constant(Tensor4::zeros(Shape4::new(1, 1, 1, 1)));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let stats = RunningStats {
            mean: &mut rm,
            var: &mut rv,
            momentum: 0.9,
            eps: 1e-5,
        };
        let y = tape.batch_norm(x, g, b, Mode::Train, stats).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::zeros(Shape4::new(0, 1, 2, 2)));
        let g = tape.constant(Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0));
        let b = tape.constant(Tensor4::zeros(Shape4::new(1, 1, 1, 1)));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let stats = RunningStats {
            mean: &mut rm,
            var: &mut rv,
            momentum: 0.9,
            eps: 1e-5,
        };
        assert!(matches!(
            tape.batch_norm(x, g, b, Mode::Train, stats),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn softmax_is_normalised_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape4::new(1, 3, 1, 2), &[1.0, -2.0, 0.5, 3.0, 2.0, 2.0]));
        let y = tape.softmax_channels(x);
        let shifted = tape.constant(t(Shape4::new(1, 3, 1, 2), &[11.0, -2.0, 10.5, 3.0, 12.0, 2.0]));
        let ys = tape.softmax_channels(shifted);
        let v = tape.value(y).clone();
        for p in 0..2 {
            let total: f64 = (0..3).map(|c| v.at(0, c, 0, p)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        for (a, b) in v.data().iter().zip(tape.value(ys).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_nll_ignores_void_and_checks_labels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::zeros(Shape4::new(1, 2, 1, 2)));
        let loss = tape.focal_nll(x, &[Some(0), None], &[1.0, 1.0], 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            tape.focal_nll(x, &[Some(2), None], &[1.0, 1.0], 0.0),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
