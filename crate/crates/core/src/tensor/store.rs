//! Named parameter storage with namespace-level freezing and hashing.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Stable handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Names use dotted
/// namespaces (`encoder.lstm_fwd.w_x`) so training stages can freeze or
/// checkpoint whole subsystems by prefix.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.lookup.contains_key(name),
            "parameter {name} registered twice"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        let id = self.names.len() - 1;
        self.lookup.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Combined content hash of every parameter whose name starts with
    /// `prefix`, in registration order.
    pub fn namespace_hash(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, value) in self.iter() {
            if name.starts_with(prefix) {
                h ^= value.content_hash();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Per-parameter hashes, useful for pinpointing freeze violations.
    pub fn all_hashes(&self) -> Vec<(String, u64)> {
        self.iter().map(|(n, t)| (n.to_string(), t.content_hash())).collect()
    }
}

/// Uniform Xavier/Glorot init for a 2-D weight (or 1-D vector).
pub fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (shape[0], shape[0]),
        _ => panic!("xavier expects rank 1 or 2"),
    };
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-limit..limit)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn namespace_hash_tracks_only_its_prefix() {
        let mut store = ParamStore::new();
        let a = store.register("enc.w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let _b = store.register("dec.w", Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let enc0 = store.namespace_hash("enc.");
        let dec0 = store.namespace_hash("dec.");
        store.get_mut(a).data_mut()[0] = 9.0;
        assert_ne!(store.namespace_hash("enc."), enc0);
        assert_eq!(store.namespace_hash("dec."), dec0);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0));
        store.register("w", Tensor::scalar(1.0));
    }
}
