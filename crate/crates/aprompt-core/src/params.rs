//! Named learnable parameters.
//!
//! Every tensor gets its own RNG stream derived from `(master seed, name)`,
//! so adding or removing a parameter group (ablation toggles) never shifts
//! the initialization of the others.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate parameter {name}");
        self.map.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on a tape, in name order.
    pub fn mount<'t>(&self, tape: &'t Tape) -> MountedParams<'t> {
        MountedParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.input(v.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a mounted [`ParamStore`].
pub struct MountedParams<'t> {
    map: BTreeMap<String, Var<'t>>,
}

impl<'t> MountedParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Collects gradients per parameter name (zeros where unused).
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

/// 64-bit FNV-1a hash, used to derive per-parameter seeds.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG stream for one named parameter under a master seed.
pub fn seeded_rng(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ fnv1a64(name.as_bytes()))
}

/// He-style normal initialization with the given fan-in.
pub fn init_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_name_streams_are_independent() {
        let a1 = init_normal(&[4], 4, &mut seeded_rng(0, "a"));
        let a2 = init_normal(&[4], 4, &mut seeded_rng(0, "a"));
        let b = init_normal(&[4], 4, &mut seeded_rng(0, "b"));
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        let a_other_seed = init_normal(&[4], 4, &mut seeded_rng(1, "a"));
        assert_ne!(a1, a_other_seed);
    }

    #[test]
    fn mount_and_grads_round_trip() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![2.0, 3.0]));
        let tape = Tape::new();
        let mounted = store.mount(&tape);
        let w = mounted.var("w");
        let loss = w.mul(w).sum();
        let grads = tape.backward(loss);
        let by_name = mounted.grads_by_name(&grads);
        assert_eq!(by_name["w"].data(), &[4.0, 6.0]);
    }
}
