use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::array::{NdArray, Real};
use super::rng::Rng;
use super::tape::{Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Clone, Debug)]
struct Entry<T: Real> {
    name: String,
    value: NdArray<T>,
    frozen: bool,
}

/// Named model parameters in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("ParamStore::add", format!("duplicate parameter `{name}`")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &NdArray<T> {
        &self.entries[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Replace a parameter value; rejected for frozen parameters or a shape change.
    pub fn set(&mut self, id: ParamId, value: NdArray<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.frozen {
            return Err(Error::FrozenParameter(e.name.clone()));
        }
        if e.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    /// Mutable access for optimizers; rejected for frozen parameters.
    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut NdArray<T>> {
        let e = &mut self.entries[id.0];
        if e.frozen {
            return Err(Error::FrozenParameter(e.name.clone()));
        }
        Ok(&mut e.value)
    }

    /// Freeze every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = true;
            n += 1;
        }
        n
    }

    pub fn unfreeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.frozen = false);
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &NdArray<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over names, shapes and values of the parameters whose name
    /// starts with `prefix` (empty prefix: all).
    pub fn checksum(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Initialization helpers used by model constructors.
pub struct Init<'a> {
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> NdArray<f32> {
        NdArray::from_fn(shape.to_vec(), |_| (self.rng.normal() * std) as f32)
    }

    /// He-style fan-in scaled normal.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> NdArray<f32> {
        self.normal(shape, gain / (fan_in as f64).sqrt())
    }
}

/// A forward pass: a fresh tape with every parameter bound as a leaf.
pub struct Ctx<T: Real = f32> {
    pub tape: Tape<T>,
    vars: Vec<Var>,
}

impl<T: Real> Ctx<T> {
    /// Bind parameters for training; frozen ones receive no gradient.
    pub fn train(store: &ParamStore<T>) -> Self {
        Self::bind(store, true)
    }

    /// Bind parameters as constants.
    pub fn inference(store: &ParamStore<T>) -> Self {
        Self::bind(store, false)
    }

    fn bind(store: &ParamStore<T>, grads: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), grads && !e.frozen))
            .collect();
        Self { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// The tape and the parameter bindings, indexed by [`ParamId::index`].
    pub fn parts(&mut self) -> (&mut Tape<T>, &[Var]) {
        (&mut self.tape, &self.vars)
    }

    /// Backward from `loss`, collecting per-parameter gradients.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut g = self.tape.backward(loss)?;
        Ok(ParamGrads {
            grads: self.vars.iter().map(|&v| g.take(v)).collect(),
        })
    }
}

/// Gradients for every parameter of a store, `None` where none flowed.
#[derive(Debug, Clone)]
pub struct ParamGrads<T: Real = f32> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&NdArray<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NdArray<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| {
                let f = v.to_f64().unwrap();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Sum of two gradient sets in a fixed order.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", NdArray::zeros([2])).unwrap();
        assert!(s.add("a", NdArray::zeros([2])).is_err());
    }

    #[test]
    fn frozen_params_reject_updates_and_get_no_grad() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("enc.w", NdArray::full([2], 1.0)).unwrap();
        let b = s.add("dec.w", NdArray::full([2], 2.0)).unwrap();
        assert_eq!(s.freeze_prefix("enc."), 1);
        assert!(matches!(s.set(a, NdArray::zeros([2])), Err(Error::FrozenParameter(_))));
        assert!(s.get_mut(a).is_err());
        let before = s.checksum("enc.");

        let mut ctx = Ctx::train(&s);
        let m = ctx.tape.mul(ctx.p(a), ctx.p(b)).unwrap();
        let l = ctx.tape.sum(m);
        let g = ctx.param_grads(l).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(s.checksum("enc."), before);
    }
}
