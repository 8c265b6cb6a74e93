//! Named parameter storage and gradient collection.
//!
//! Parameters live outside the tape in a [`ParamStore`] keyed by name
//! (ordered map, so iteration order is stable across runs). Each forward
//! pass binds them onto a fresh [`Tape`](super::Tape) as leaves; after
//! `backward` the leaf gradients are collected back by name.

use std::collections::BTreeMap;

use super::{Mat, Tape, Tid};

/// Ordered collection of named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; panics on duplicate names, which are always
    /// a wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    /// Move every parameter of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) {
        for (name, value) in other.map {
            self.insert(name, value);
        }
    }

    /// Bind every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.map {
            ids.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundParams { ids }
    }
}

/// Tape handles for one forward pass's bound parameters.
pub struct BoundParams {
    ids: BTreeMap<String, Tid>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Tid {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound on this tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Tid)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node handle.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub(super) fn new(grads: Vec<Option<Mat>>) -> Self {
        Self { grads }
    }

    /// Gradient with respect to a node, if any path reached it.
    pub fn wrt(&self, t: Tid) -> Option<&Mat> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, or zeros of the leaf's shape when the output
    /// did not depend on it.
    pub fn wrt_or_zeros(&self, tape: &Tape, t: Tid) -> Mat {
        match self.wrt(t) {
            Some(g) => g.clone(),
            None => Mat::zeros(tape.value(t).dim()),
        }
    }

    /// Collect gradients for every bound parameter, by name.
    pub fn named(&self, tape: &Tape, bound: &BoundParams) -> BTreeMap<String, Mat> {
        bound
            .iter()
            .map(|(name, id)| (name.to_string(), self.wrt_or_zeros(tape, id)))
            .collect()
    }
}
