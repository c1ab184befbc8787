//! Named parameter storage and the per-forward-pass [`Session`].

use std::collections::HashMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics, which are
    /// persisted but never touched by the optimizer.
    pub learnable: bool,
}

/// Ordered, uniquely named tensors. Insertion order is the iteration order
/// and the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, learnable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            learnable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].learnable).collect()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn learnable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.learnable).map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    learnable: e.learnable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replace every tensor from `(name, tensor)` pairs that must match this
    /// store entry for entry, in order, by name and shape.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (index, entry) in self.entries.iter().enumerate() {
            let found = entries.get(index);
            let ok = found.is_some_and(|(n, t)| *n == entry.name && t.shape() == entry.tensor.shape());
            if !ok {
                return Err(Error::StateMismatch {
                    index,
                    expected: format!("{} {:?}", entry.name, entry.tensor.shape()),
                    found: found.map_or("end of entries".to_string(), |(n, t)| format!("{n} {:?}", t.shape())),
                });
            }
        }
        if entries.len() != self.entries.len() {
            let (n, t) = &entries[self.entries.len()];
            return Err(Error::StateMismatch {
                index: self.entries.len(),
                expected: "end of entries".to_string(),
                found: format!("{n} {:?}", t.shape()),
            });
        }
        for (entry, (_, tensor)) in self.entries.iter_mut().zip(entries) {
            entry.tensor = tensor;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One forward pass: a fresh tape, parameters bound lazily as leaves, the
/// dropout stream, and batch-norm statistic updates waiting to be applied by
/// the parameter owner.
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Rng,
    updates: Vec<(ParamId, Tensor<T>)>,
    track_params: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, dropout_rng: Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: dropout_rng,
            updates: Vec::new(),
            track_params: true,
        }
    }

    /// Continue recording on an existing tape.
    pub fn with_tape(store: &'a ParamStore<T>, mode: Mode, dropout_rng: Rng, tape: Tape<T>) -> Self {
        let mut s = Self::new(store, mode, dropout_rng);
        s.tape = tape;
        s
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Use `var` in place of the stored value of `id`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Parameters are bound as constants (no gradient bookkeeping).
    pub fn frozen(mut self) -> Self {
        self.track_params = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let learnable = self.track_params && self.store.entries[id.0].learnable;
        let v = self.tape.leaf(self.store.get(id).clone(), learnable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn queue_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    /// Buffer updates recorded during the pass (batch-norm running stats).
    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradient for every learnable parameter in store order; parameters the
    /// pass never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.store
            .learnable_ids()
            .into_iter()
            .map(|id| {
                let g = self.bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}

/// Apply queued buffer updates.
pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_ordered_and_unique() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a.weight", Tensor::zeros(&[2]), true);
        let b = store.add("a.running_mean", Tensor::zeros(&[2]), false);
        assert_eq!(store.find("a.running_mean"), Some(b));
        assert_eq!(store.learnable_ids(), vec![a]);
        assert_eq!(store.learnable_scalars(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::zeros(&[1]), true);
        store.add("x", Tensor::zeros(&[1]), true);
    }

    #[test]
    fn load_reports_first_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2]), true);
        store.add("b", Tensor::zeros(&[3]), true);
        let err = store
            .load_entries(vec![("a".into(), Tensor::zeros(&[2])), ("b".into(), Tensor::zeros(&[4]))])
            .unwrap_err();
        assert!(matches!(err, Error::StateMismatch { index: 1, .. }), "{err}");
        assert!(err.to_string().contains("b [3]"));
    }
}
