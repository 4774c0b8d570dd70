//! Named trainable parameters and their binding onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Subject to decoupled weight decay (matrices and kernels, not biases
    /// or norm affines).
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] as leaves of one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Use caller-made leaves as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(v)).collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        self.get(id)
    }
}

/// Allocates parameters with the crate's deterministic initialization rule:
/// weights uniform in `±√(1/fan_in)`, biases zero, norm scales one. Every
/// initial value lies on the `f32` grid so checkpoints round-trip exactly.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32 as f64)
            .collect();
        let t = Tensor::new(shape, data).expect("weight shape");
        self.store.add(name, t, true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), false)
    }

    /// Zero-initialized matrix that still receives weight decay.
    pub fn zero_weight(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), true)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape), false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_bounded_and_f32_exact() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let ia = ParamBuilder::new(&mut a, 3).weight("w", &[8, 16], 16);
        ParamBuilder::new(&mut b, 3).weight("w", &[8, 16], 16);
        assert_eq!(a, b);
        for &v in a.get(ia).data() {
            assert!(v.abs() <= 0.25);
            assert_eq!(v as f32 as f64, v);
        }
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        let id = ParamBuilder::new(&mut s, 0).zeros("b", &[3]);
        assert!(s.set(id, Tensor::zeros(&[4])).is_err());
        assert!(s.set(id, Tensor::ones(&[3])).is_ok());
    }
}
