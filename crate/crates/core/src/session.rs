//! One forward (and optionally backward) pass over a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, RunningStats, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor4;

/// Batch-norm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Binds parameters onto a fresh [`Tape`] and carries the mode, dropout RNG
/// and batch-norm settings for a single pass.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn: BnConfig,
    param_grads: bool,
}

impl<'s, T: Real> Session<'s, T> {
    /// Parameters are differentiable in [`Mode::Train`] and constant in
    /// [`Mode::Eval`]; see [`with_param_grads`](Self::with_param_grads).
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn: BnConfig::default(),
            param_grads: mode == Mode::Train,
        }
    }

    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = rng;
        self
    }

    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.param_grads = on;
        self
    }

    pub fn with_bn(mut self, bn: BnConfig) -> Self {
        self.bn = bn;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape handle for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.param_grads && self.store.is_trainable(id) {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor4<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let (mean, var) = self.store.pair_mut(running_mean, running_var);
        let stats = RunningStats {
            mean: mean.data_mut(),
            var: var.data_mut(),
            momentum: self.bn.momentum,
            eps: self.bn.eps,
        };
        self.tape.batch_norm(x, g, b, self.mode, stats)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.mode, &mut self.rng)
    }

    /// Back-propagates from `loss` and returns the gradient of every
    /// parameter that took part in the pass.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Vec<T>)>> {
        self.tape.backward(loss)?;
        let mut grads = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = *slot {
                if let Some(g) = self.tape.take_grad(v) {
                    grads.push((ParamId(i), g));
                }
            }
        }
        Ok(grads)
    }
}
