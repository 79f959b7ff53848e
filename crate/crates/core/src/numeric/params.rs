//! Named parameter storage with gradient buffers and trainable flags.
//! Insertion order is the canonical order for optimizer sweeps and
//! checkpoint serialization, so runs stay bit-reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::scalar::Scalar;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::Tensor;

#[derive(Debug)]
pub struct ParamEntry<E: Scalar> {
    pub tensor: Tensor<E>,
    pub grad: Tensor<E>,
    pub trainable: bool,
    pub grad_ready: bool,
}

#[derive(Debug)]
pub struct ParamStore<E: Scalar = f32> {
    order: Vec<String>,
    index: HashMap<String, usize>,
    entries: Vec<ParamEntry<E>>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            order: Vec::new(),
            index: HashMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Registry(format!("duplicate parameter '{name}'")));
        }
        let grad = Tensor::zeros(tensor.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.order.push(name.to_string());
        self.entries.push(ParamEntry {
            tensor,
            grad,
            trainable,
            grad_ready: false,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<E>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<E>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))?;
        Ok(&mut self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<E>> {
        Ok(&self.get(name)?.tensor)
    }

    /// Swap in a new tensor (used by router re-dimensioning); the gradient
    /// buffer is re-allocated to the new shape.
    pub fn replace_tensor(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        let e = self.get_mut(name)?;
        e.grad = Tensor::zeros(tensor.shape());
        e.grad_ready = false;
        e.tensor = tensor;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))?;
        self.entries.remove(i);
        self.order.remove(i);
        self.index.remove(name);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<E>)> {
        self.order
            .iter()
            .map(move |n| (n.as_str(), &self.entries[self.index[n]]))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.trainable = false;
        }
    }

    /// Mark every parameter whose name starts with `prefix` trainable.
    /// Returns how many matched.
    pub fn unfreeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (i, name) in self.order.iter().enumerate() {
            if name.starts_with(prefix) {
                self.entries[i].trainable = true;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            for v in e.grad.data_mut() {
                *v = E::ZERO;
            }
            e.grad_ready = false;
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor<E>) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.grad.shape() != delta.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                delta.shape(),
                e.grad.shape()
            )));
        }
        for (g, d) in e.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
        e.grad_ready = true;
        Ok(())
    }

    /// Σ|θ| over parameters with the given prefix, with the entry count so
    /// callers can flag an empty selection.
    pub fn l1_by_prefix(&self, prefix: &str) -> (E, usize) {
        let mut total = E::ZERO;
        let mut n = 0;
        for (name, e) in self.iter() {
            if name.starts_with(prefix) {
                total += crate::numeric::ops::l1(&e.tensor);
                n += 1;
            }
        }
        (total, n)
    }

    /// FNV-1a over names, shapes and element bits of matching parameters.
    /// The freezing contract is asserted by comparing these hashes across
    /// stage boundaries.
    pub fn hash_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for (name, e) in self.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for &d in e.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                eat(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn convert<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, e) in self.iter() {
            out.insert(name, e.tensor.convert(), e.trainable)
                .expect("names already unique");
        }
        out
    }

    /// Put every parameter on a tape as a leaf (trainable entries require
    /// gradients) and return the name → node map.
    pub fn stage_all(&self, tape: &mut Tape<E>) -> LeafMap {
        let mut map = HashMap::new();
        for (name, e) in self.iter() {
            let id = tape.leaf(e.tensor.clone(), e.trainable);
            map.insert(name.to_string(), id);
        }
        LeafMap { map }
    }

    /// Copy tape gradients back into the store for every trainable entry.
    /// Trainable leaves the forward never touched get zero gradients.
    pub fn harvest_grads(&mut self, tape: &Tape<E>, leaves: &LeafMap) -> Result<()> {
        let names: Vec<String> = self
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let id = leaves.node(&name)?;
            match tape.grad(id) {
                Some(g) => {
                    let g = g.clone();
                    self.accumulate_grad(&name, &g)?;
                }
                None => {
                    self.get_mut(&name)?.grad_ready = true;
                }
            }
        }
        Ok(())
    }
}

pub struct LeafMap {
    map: HashMap<String, NodeId>,
}

impl LeafMap {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Injection(format!("no staged leaf for '{name}'")))
    }
}
