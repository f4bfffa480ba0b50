//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::session::Session;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords_per_tensor: usize,
    /// Seeds the session RNG (dropout masks) and coordinate sampling.
    pub seed: u64,
    pub mode: Mode,
}

impl GradCheck {
    pub fn new(tolerance: f64) -> Self {
        GradCheck {
            step: 1e-5,
            tolerance,
            max_coords_per_tensor: 64,
            seed: 0,
            mode: Mode::Train,
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords_per_tensor = n;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    /// `max |analytic - numeric| / max(1e-8, |numeric|)` over checked coordinates.
    pub max_rel_err: f64,
    /// Location of the worst coordinate, e.g. `input0[17]` or `enc.conv.weight[3]`.
    pub worst: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coords: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error used throughout the suite.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

enum Target {
    Input(usize),
    Param(ParamId),
}

impl GradCheck {
    /// Checks gradients of the scalar returned by `f` with respect to every
    /// tensor in `inputs` and every trainable entry of `store`.
    pub fn run<F>(
        &self,
        name: &str,
        store: &mut ParamStore<f64>,
        inputs: &mut [Tensor4<f64>],
        mut f: F,
    ) -> Result<CheckReport>
    where
        F: FnMut(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
    {
        let mut eval = |store: &mut ParamStore<f64>, inputs: &[Tensor4<f64>], grads: bool| -> Result<(f64, Vec<Option<Vec<f64>>>, Vec<(ParamId, Vec<f64>)>)> {
            let mut s = Session::new(store, self.mode, self.seed).with_param_grads(grads);
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    if grads {
                        s.tape.variable(t.clone())
                    } else {
                        s.tape.constant(t.clone())
                    }
                })
                .collect();
            let loss = f(&mut s, &vars)?;
            let value = s.tape.value(loss).item()?;
            if !grads {
                return Ok((value, Vec::new(), Vec::new()));
            }
            let param_grads = s.backward(loss)?;
            let input_grads = vars.iter().map(|&v| s.tape.grad(v).map(<[f64]>::to_vec)).collect();
            Ok((value, input_grads, param_grads))
        };

        let (_, input_grads, param_grads) = eval(store, inputs, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut targets: Vec<(Target, Vec<usize>)> = Vec::new();
        for (i, t) in inputs.iter().enumerate() {
            targets.push((Target::Input(i), self.pick(t.numel(), &mut rng)));
        }
        let trainable: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in trainable {
            targets.push((Target::Param(id), self.pick(store.get(id).numel(), &mut rng)));
        }

        let mut worst = (0.0f64, String::new());
        let mut worst_pair = (0.0, 0.0);
        let mut coords = 0;
        for (target, idxs) in targets {
            let analytic: Vec<f64> = match target {
                Target::Input(i) => input_grads[i].clone().unwrap_or_else(|| vec![0.0; inputs[i].numel()]),
                Target::Param(id) => param_grads
                    .iter()
                    .find(|(p, _)| *p == id)
                    .map(|(_, g)| g.clone())
                    .unwrap_or_else(|| vec![0.0; store.get(id).numel()]),
            };
            for idx in idxs {
                let numeric = {
                    let mut probe = |delta: f64, store: &mut ParamStore<f64>, inputs: &mut [Tensor4<f64>]| -> Result<f64> {
                        let slot = match target {
                            Target::Input(i) => &mut inputs[i].data_mut()[idx],
                            Target::Param(id) => &mut store.get_mut(id).data_mut()[idx],
                        };
                        let orig = *slot;
                        *slot = orig + delta;
                        let out = eval(store, inputs, false).map(|r| r.0);
                        let slot = match target {
                            Target::Input(i) => &mut inputs[i].data_mut()[idx],
                            Target::Param(id) => &mut store.get_mut(id).data_mut()[idx],
                        };
                        *slot = orig;
                        out
                    };
                    let plus = probe(self.step, store, inputs)?;
                    let minus = probe(-self.step, store, inputs)?;
                    (plus - minus) / (2.0 * self.step)
                };
                let err = rel_err(analytic[idx], numeric);
                coords += 1;
                if err > worst.0 || worst.1.is_empty() {
                    let label = match target {
                        Target::Input(i) => format!("input{i}[{idx}]"),
                        Target::Param(id) => format!("{}[{idx}]", store.name(id)),
                    };
                    worst = (err, label);
                    worst_pair = (analytic[idx], numeric);
                }
            }
        }
        Ok(CheckReport {
            name: name.to_string(),
            max_rel_err: worst.0,
            worst: worst.1,
            worst_pair,
            coords,
            tolerance: self.tolerance,
            passed: worst.0 < self.tolerance,
        })
    }

    fn pick(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if n <= self.max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, self.max_coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRegistry;
    use crate::tensor::Shape4;

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x * x) via weighted_sum with the *value* of x as constant
        // coefficients has analytic gradient x but true gradient 2x.
        let mut store = ParamRegistry::new().init::<f64>(0);
        let mut inputs = vec![Tensor4::full(Shape4::new(1, 1, 1, 3), 0.5)];
        let report = GradCheck::new(1e-4)
            .run("wrong", &mut store, &mut inputs, |s, v| {
                let coeffs = s.tape.value(v[0]).clone();
                s.tape.weighted_sum(v[0], &coeffs)
            })
            .unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn accepts_a_right_gradient() {
        let mut store = ParamRegistry::new().init::<f64>(0);
        let mut inputs = vec![Tensor4::full(Shape4::new(1, 1, 1, 3), 0.5)];
        let report = GradCheck::new(1e-6)
            .run("scale", &mut store, &mut inputs, |s, v| {
                let y = s.tape.scale(v[0], 3.0);
                Ok(s.tape.sum(y))
            })
            .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coords, 3);
    }
}
