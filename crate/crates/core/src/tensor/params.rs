use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{invalid, Result, Tensor, TensorError};
use crate::scalar::Scalar;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
}

/// Named, ordered set of trainable tensors with their gradient accumulators.
///
/// Each store carries a unique id so a [`Graph`](super::Graph) can tell stores
/// apart; clones get a fresh id.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    grad: e.grad.clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            uid: next_uid(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid("param", format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(Entry {
            name,
            value,
            grad: None,
        });
        Ok(id)
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

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<S>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if grad.shape() != e.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                lhs: e.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        e.grad = Some(grad);
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<S>) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(acc) => acc.add_assign_from(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Resets every gradient accumulator to zeros.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Some(Tensor::zeros(e.value.shape()));
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// True when both stores hold the same names with the same shapes, in order.
    pub fn congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Copies all values from `other`, which must be congruent.
    pub fn copy_values_from(&mut self, other: &Self) -> Result<()> {
        self.ensure_congruent(other, "copy_values_from")?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// `self ← tau·online + (1 − tau)·self`, elementwise over every parameter.
    pub fn soft_update_from(&mut self, online: &Self, tau: S) -> Result<()> {
        self.ensure_congruent(online, "soft_update")?;
        let keep = S::one() - tau;
        for (t, o) in self.entries.iter_mut().zip(&online.entries) {
            for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *tv = tau * ov + keep * *tv;
            }
        }
        Ok(())
    }

    fn ensure_congruent(&self, other: &Self, op: &'static str) -> Result<()> {
        if let Some((a, b)) = self
            .entries
            .iter()
            .zip(&other.entries)
            .find(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.value.shape().to_vec(),
                rhs: b.value.shape().to_vec(),
            });
        }
        if self.entries.len() != other.entries.len() {
            return Err(invalid(
                op,
                format!("{} parameters vs {}", self.entries.len(), other.entries.len()),
            ));
        }
        Ok(())
    }

    /// Replaces values from a list of named tensors; every parameter must be present.
    pub fn load_values<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor<S>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in named {
            let id = self.id(name)?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: e.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::Checkpoint(format!(
                "parameter `{}` missing from checkpoint",
                self.entries[i].name
            )));
        }
        Ok(())
    }
}

/// A store viewed either as trainable or as frozen constants when bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct Bound<'a, S> {
    pub store: &'a ParamStore<S>,
    pub trainable: bool,
}

impl<'a, S: Scalar> Bound<'a, S> {
    pub fn trainable(store: &'a ParamStore<S>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<S>) -> Self {
        Self { store, trainable: false }
    }

    pub fn var(&self, g: &mut super::Graph<S>, id: ParamId) -> super::Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}
