use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::num::Scalar;
use crate::rng::SeededRng;

use super::{Graph, Var};

/// Named parameter tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        assert!(
            self.tensors.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Insert a zero tensor.
    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    /// Insert a tensor with i.i.d. `N(0, scale²)` entries.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], scale: f64, rng: &mut SeededRng) {
        let arr = rng.normal_array::<T>(shape).mapv(|v| v * T::from_f64(scale));
        self.insert(name, arr);
    }

    /// Insert a tensor of ones (normalization gains).
    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::from_elem(IxDyn(shape), T::one()));
    }

    /// FNV-1a over raw little-endian element bytes, iterated in name order.
    /// Used by tests to detect any mutation of frozen tensors.
    pub fn content_hash(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, tensor) in &self.tensors {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in tensor.iter() {
                for b in v.into_f64().to_le_bytes() {
                    eat(b);
                }
            }
        }
        hash
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every tensor of a registered [`ParamStore`].
pub struct GraphParams {
    map: BTreeMap<String, Var>,
}

impl GraphParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }
}

/// Put every tensor of `store` on the tape. When `trainable` is set the
/// tensors are registered under `prefix` + name so their gradients can be
/// collected; otherwise they enter as constants.
pub fn register_store<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    trainable: bool,
    prefix: &str,
) -> GraphParams {
    let mut map = BTreeMap::new();
    for (name, tensor) in store.iter() {
        let var = if trainable {
            g.param(&format!("{prefix}{name}"), tensor.clone())
        } else {
            g.constant(tensor.clone())
        };
        map.insert(name.clone(), var);
    }
    GraphParams { map }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_detects_mutation() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::<f32>::new();
        store.normal("a", &[3, 3], 0.1, &mut rng);
        store.zeros("b", &[2]);
        let h0 = store.content_hash();
        assert_eq!(h0, store.content_hash());
        store.get_mut("a")[[0, 0]] += 1e-7;
        assert_ne!(h0, store.content_hash());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::<f32>::new();
        store.zeros("x", &[1]);
        store.zeros("x", &[1]);
    }
}
