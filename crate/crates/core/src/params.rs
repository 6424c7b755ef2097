//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressable set of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Glorot-uniform weight matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform([fan_in, fan_out], bound, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("param::set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids of parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    /// Overwrites every parameter under `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        let ids: Vec<_> = self.with_prefix(prefix).collect();
        for id in ids {
            let shape = self.values[id.0].shape().to_vec();
            self.values[id.0] = Tensor::zeros(shape);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Which parameters become differentiable leaves on a tape.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    None,
    Mask(Vec<bool>),
}

impl Trainable {
    pub fn prefixes<T: Scalar>(store: &ParamStore<T>, prefixes: &[&str]) -> Self {
        Trainable::Mask(
            store
                .iter()
                .map(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .collect(),
        )
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Mask(m) => m.get(id.0).copied().unwrap_or(false),
        }
    }
}

/// Lazily creates one tape leaf per parameter touched by a forward pass.
pub struct Binder<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: Trainable,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, 's, T: Scalar> Binder<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: Trainable) -> Self {
        Binder {
            tape,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Every parameter is constant; nothing is differentiated.
    pub fn inference(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(tape, store, Trainable::None)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable.is_trainable(id) {
            self.tape.param(value)?
        } else {
            self.tape.constant(value)?
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor<T>) -> Result<Var<'t, T>> {
        self.tape.constant(t)
    }

    /// Collects gradients of the bound trainable parameters.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::empty(self.store.len());
        for (i, slot) in self.bound.borrow().iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads.get(*v) {
                    out.grads[i] = Some(g.to_vec());
                }
            }
        }
        out
    }
}

/// Gradient per parameter; `None` where the parameter was untouched or frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Elementwise sum; used at the batch barrier.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, &b) in m.iter_mut().zip(t) {
                            *a = *a + b;
                        }
                    }
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let n = self.global_norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}
