//! Named parameters, batch-norm buffers, and the builder that creates them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Float, Tape, Tensor};

/// Which branch of an attention block a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Trunk,
    Mask,
    Other,
}

impl Role {
    /// Mask under a `.mask.` scope, trunk under `.trunk.`, otherwise other.
    pub fn from_name(name: &str) -> Self {
        let dotted = format!(".{name}");
        if dotted.contains(".mask.") {
            Role::Mask
        } else if dotted.contains(".trunk.") {
            Role::Trunk
        } else {
            Role::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Trunk => "trunk",
            Role::Mask => "mask",
            Role::Other => "other",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_batchnorm(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Float = f32> {
    pub name: String,
    pub role: Role,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

impl<T: Float> Parameter<T> {
    /// Mutable access to the value; copies only if a tape still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

/// Every trainable tensor of a model, addressed by slot or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter<T> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<T> {
        &mut self.params[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.slot(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.params.iter().filter(|p| p.role == role).count()
    }

    /// Adds gradients from a finished backward pass into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for (slot, g) in tape.param_grads() {
            let p = self
                .params
                .get_mut(slot)
                .ok_or_else(|| Error::Tape(format!("gradient for unknown parameter slot {slot}")))?;
            Arc::make_mut(&mut p.value).accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Clears every gradient buffer.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.value.grad().is_some() {
                Arc::make_mut(&mut p.value).clear_grad();
            }
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> Result<usize> {
        if self.by_name.contains_key(&name) {
            return Err(Error::Arch(format!("duplicate parameter name {name}")));
        }
        let slot = self.params.len();
        self.by_name.insert(name.clone(), slot);
        self.params.push(Parameter {
            role: Role::from_name(&name),
            name,
            kind,
            value: Arc::new(value.with_requires_grad(true)),
        });
        Ok(slot)
    }
}

/// Running statistics of every batch-norm layer, addressed by slot.
#[derive(Clone, Debug, Default)]
pub struct BufferStore<T: Float = f32> {
    pub names: Vec<String>,
    pub stats: Vec<BnStats<T>>,
}

impl<T: Float> BufferStore<T> {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn all_ready(&self) -> bool {
        self.stats.iter().all(|s| s.ready)
    }
}

/// Creates parameters under a dotted name scope with seeded initialization.
pub struct ParamBuilder<T: Float = f32> {
    scope: Vec<String>,
    rng: ChaCha8Rng,
    params: ParamStore<T>,
    buffers: BufferStore<T>,
}

impl<T: Float> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            scope: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamStore::default(),
            buffers: BufferStore::default(),
        }
    }

    /// Runs `f` with `name` pushed onto the scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn qualified(&self, leaf: &str) -> String {
        let mut name = self.scope.join(".");
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(leaf);
        name
    }

    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, leaf: &str, kind: ParamKind, shape: &[usize], fan_in: usize) -> Result<usize> {
        self.scaled_normal(leaf, kind, shape, fan_in, 1.0)
    }

    /// Normal with standard deviation `gain * sqrt(2 / fan_in)`.
    pub fn scaled_normal(
        &mut self,
        leaf: &str,
        kind: ParamKind,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
    ) -> Result<usize> {
        let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Arch(e.to_string()))?;
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.params.push(self.qualified(leaf), kind, value)
    }

    pub fn constant(&mut self, leaf: &str, kind: ParamKind, shape: &[usize], value: f64) -> Result<usize> {
        self.params
            .push(self.qualified(leaf), kind, Tensor::full(shape, T::of(value)))
    }

    pub fn bn_buffer(&mut self, channels: usize) -> usize {
        self.buffers.names.push(self.qualified(""));
        self.buffers.stats.push(BnStats::new(channels));
        self.buffers.len() - 1
    }

    pub fn finish(self) -> (ParamStore<T>, BufferStore<T>) {
        (self.params, self.buffers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_follows_scope() {
        assert_eq!(Role::from_name("attention1.mask.enc2.conv2.weight"), Role::Mask);
        assert_eq!(Role::from_name("attention2.trunk.res1.bn1.gamma"), Role::Trunk);
        assert_eq!(Role::from_name("res1.conv1.weight"), Role::Other);
        assert_eq!(Role::from_name("attention1.output.conv1.weight"), Role::Other);
    }

    #[test]
    fn scoped_names_and_duplicates() {
        let mut b = ParamBuilder::<f32>::new(0);
        let name = b
            .scoped("a", |b| b.scoped("mask", |b| Ok(b.qualified("w"))))
            .unwrap();
        assert_eq!(name, "a.mask.w");
        b.constant("x", ParamKind::Bias, &[2], 0.0).unwrap();
        assert!(b.constant("x", ParamKind::Bias, &[2], 0.0).is_err());
    }

    #[test]
    fn he_init_scale() {
        let mut b = ParamBuilder::<f64>::new(1);
        let slot = b.he_normal("w", ParamKind::ConvWeight, &[64, 50], 50).unwrap();
        let (store, _) = b.finish();
        let v = &store.get(slot).value;
        let var = v.data().iter().map(|x| x * x).sum::<f64>() / v.numel() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }

    #[test]
    fn same_seed_same_values() {
        let make = || {
            let mut b = ParamBuilder::<f32>::new(7);
            b.he_normal("w", ParamKind::ConvWeight, &[3, 3], 3).unwrap();
            b.finish().0.get(0).value.data().to_vec()
        };
        assert_eq!(make(), make());
    }
}
