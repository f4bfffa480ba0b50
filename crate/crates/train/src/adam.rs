//! Adam with decoupled weight decay.

use ddnet_core::{ParamId, ParamStore, Real, Tensor4};

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    /// First and second moments per parameter; `None` for buffers.
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        let moments = store
            .ids()
            .map(|id| {
                store.is_trainable(id).then(|| {
                    let n = store.get(id).numel();
                    (vec![0.0; n], vec![0.0; n])
                })
            })
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient. Any non-finite gradient aborts before anything changes.
    pub fn update<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
        lr: f64,
        weight_decay: f64,
        iteration: usize,
    ) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(TrainError::Invalid("optimizer state does not match the parameter store".into()));
        }
        for (id, g) in grads {
            if g.len() != store.get(*id).numel() {
                return Err(TrainError::Invalid(format!("gradient of {} has the wrong length", store.name(*id))));
            }
            if g.iter().any(|v| !v.as_f64().is_finite()) {
                return Err(TrainError::NonFinite {
                    what: format!("gradient of {}", store.name(*id)),
                    iteration,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut by_id: Vec<Option<&[T]>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some((m, v)) = self.moments[id.index()].as_mut() else { continue };
            let g = by_id[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mi = self.beta1 * f64::from(m[i]) + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * f64::from(v[i]) + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let pi = p[i].as_f64();
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps) + lr * weight_decay * pi;
                p[i] = T::from_f64_lossy(pi - step);
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`adam.m.<param>`, `adam.v.<param>`).
    pub fn named_state<T: Real>(&self, store: &ParamStore<T>) -> Vec<(String, Tensor4<f32>)> {
        let mut out = Vec::new();
        for id in store.ids() {
            if let Some((m, v)) = &self.moments[id.index()] {
                let shape = store.get(id).shape();
                let name = store.name(id);
                out.push((format!("adam.m.{name}"), Tensor4::from_vec(shape, m.clone()).expect("sized")));
                out.push((format!("adam.v.{name}"), Tensor4::from_vec(shape, v.clone()).expect("sized")));
            }
        }
        out
    }

    /// Restores moments written by [`named_state`](Self::named_state).
    pub fn load_state<T: Real>(&mut self, store: &ParamStore<T>, entries: Vec<(String, Tensor4<f32>)>, step: u64) -> Result<()> {
        let mut seen = 0;
        for (name, t) in entries {
            let (which, param) = if let Some(p) = name.strip_prefix("adam.m.") {
                (0, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (1, p)
            } else {
                return Err(TrainError::Invalid(format!("unexpected optimizer entry {name}")));
            };
            let id = store
                .find(param)
                .ok_or_else(|| TrainError::Invalid(format!("optimizer entry for unknown parameter {param}")))?;
            let slot = self.moments[id.index()]
                .as_mut()
                .ok_or_else(|| TrainError::Invalid(format!("{param} is not trainable")))?;
            let dst = if which == 0 { &mut slot.0 } else { &mut slot.1 };
            if dst.len() != t.numel() {
                return Err(TrainError::Invalid(format!("optimizer entry {name} has the wrong size")));
            }
            dst.copy_from_slice(t.data());
            seen += 1;
        }
        let expected = 2 * self.moments.iter().flatten().count();
        if seen != expected {
            return Err(TrainError::Invalid(format!("optimizer state has {seen} of {expected} moment tensors")));
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddnet_core::params::Init;
    use ddnet_core::{ParamRegistry, Shape4};

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut reg = ParamRegistry::new();
        let id = reg.register("w", Shape4::new(1, 1, 1, 1), Init::Zeros, true);
        let mut store = reg.init(0);
        store.get_mut(id).data_mut()[0] = v;
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[(id, vec![1.0])], 1e-3, 0.0, 0).unwrap();
        // m_hat = 1 and v_hat = 1, so the step is lr / (1 + eps).
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = Adam::new(&store);
        for i in 0..5 {
            adam.update(&mut store, &[(id, vec![0.0])], 1e-2, 0.0, i).unwrap();
        }
        assert_eq!(store.get(id).data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay_is_geometric() {
        let (mut store, id) = scalar_store(2.0);
        let mut adam = Adam::new(&store);
        let (lr, wd) = (0.1, 0.5);
        for i in 0..4 {
            adam.update(&mut store, &[], lr, wd, i).unwrap();
        }
        let want = 2.0 * (1.0 - lr * wd).powi(4);
        assert!((store.get(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = Adam::new(&store);
        let err = adam.update(&mut store, &[(id, vec![f64::NAN])], 1e-3, 0.0, 7).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { iteration: 7, .. }));
        assert_eq!(store.get(id).data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }
}
