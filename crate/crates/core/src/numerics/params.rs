use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

/// 64-bit FNV-1a, used to derive per-tensor seeds from names.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform `[-bound, bound]` tensor seeded from `seed` and `name`.
pub fn uniform_init(name: &str, shape: &[usize], bound: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every tensor of `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

/// Maps parameter names to graph nodes, creating leaves on first use.
pub struct Binder<'s> {
    store: Option<&'s ParamStore>,
    ids: BTreeMap<String, NodeId>,
    frozen: Vec<String>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ids: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// A binder whose parameters already live in the graph.
    pub fn from_nodes(ids: BTreeMap<String, NodeId>) -> Binder<'static> {
        Binder {
            store: None,
            ids,
            frozen: Vec::new(),
        }
    }

    /// Parameters under `prefix` are bound as constants.
    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn bind<T: Real>(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let store = self.store.ok_or_else(|| Error::MissingTensor(name.into()))?;
        let t = store.get(name)?.cast::<T>();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let id = g.leaf(&t, trainable);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.ids
    }

    /// Gradients of every bound parameter that received one, as `f32`.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> BTreeMap<String, Vec<f32>> {
        self.ids
            .iter()
            .filter_map(|(name, &id)| {
                g.grad(id)
                    .map(|gr| (name.clone(), gr.iter().map(|v| v.as_f64() as f32).collect()))
            })
            .collect()
    }
}
