//! Named parameter declarations and their materialised values.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape4,
    pub init: Init,
    /// Trainable parameters receive gradients and count towards
    /// [`ParamRegistry::param_count`]; the rest are buffers such as running
    /// batch-norm statistics.
    pub trainable: bool,
}

/// Parameter declarations collected while building a network.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    decls: Vec<ParamDecl>,
}

/// FNV-1a, used to derive a per-parameter seed from its name.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Shape4, init: Init, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.decls.iter().all(|d| d.name != name),
            "duplicate parameter name {name}"
        );
        self.decls.push(ParamDecl {
            name,
            shape,
            init,
            trainable,
        });
        ParamId(self.decls.len() - 1)
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn decl(&self, id: ParamId) -> &ParamDecl {
        &self.decls[id.0]
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.decls
            .iter()
            .filter(|d| d.trainable)
            .map(|d| d.shape.numel())
            .sum()
    }

    /// Materialises every declaration. Each tensor draws from its own
    /// generator keyed by `seed` and the parameter name, so values do not
    /// depend on declaration order.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let tensors = self
            .decls
            .iter()
            .map(|d| match d.init {
                Init::Zeros => Tensor4::zeros(d.shape),
                Init::Ones => Tensor4::full(d.shape, T::one()),
                Init::HeNormal { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(d.name.as_bytes()));
                    Tensor4::randn(d.shape, (2.0 / fan_in.max(1) as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        ParamStore {
            decls: self.decls.clone(),
            tensors,
        }
    }
}

/// Values for every declared parameter and buffer.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    decls: Vec<ParamDecl>,
    tensors: Vec<Tensor4<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn decl(&self, id: ParamId) -> &ParamDecl {
        &self.decls[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.decls[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.decls[id.0].trainable
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.tensors[id.0]
    }

    /// Mutable access to two distinct entries.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor4<T>, &mut Tensor4<T>) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.tensors.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.decls.iter().position(|d| d.name == name).map(ParamId)
    }

    pub fn param_count(&self) -> usize {
        self.decls
            .iter()
            .filter(|d| d.trainable)
            .map(|d| d.shape.numel())
            .sum()
    }

    /// `(name, tensor)` pairs for trainable (`true`) or buffer (`false`) entries.
    pub fn named(&self, trainable: bool) -> Vec<(&str, &Tensor4<T>)> {
        self.decls
            .iter()
            .zip(&self.tensors)
            .filter(|(d, _)| d.trainable == trainable)
            .map(|(d, t)| (d.name.as_str(), t))
            .collect()
    }

    /// Overwrites entries by name. Every loaded name must exist with the
    /// declared shape; names absent from `entries` keep their values.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor4<T>)>) -> Result<()> {
        let index: HashMap<&str, usize> = self
            .decls
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.as_str(), i))
            .collect();
        let mut updates = Vec::with_capacity(entries.len());
        for (name, tensor) in entries {
            let &i = index
                .get(name.as_str())
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if tensor.shape() != self.decls[i].shape {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: self.decls[i].shape,
                    rhs: tensor.shape(),
                });
            }
            updates.push((i, tensor));
        }
        for (i, t) in updates {
            self.tensors[i] = t;
        }
        Ok(())
    }
}
