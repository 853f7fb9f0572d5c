use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Array, TensorError};

/// Ordered, named collection of trainable arrays.
///
/// Iteration follows insertion order, which is also the order used by the
/// checkpoint format and by every gradient store derived from it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Array)>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { entries: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Inserts or replaces `name`. Replacement keeps the original position.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = value;
        } else {
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array, TensorError> {
        self.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, a) in other.iter() {
            self.insert(format!("{prefix}{n}"), a.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new(self.seed);
        for (n, a) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, a.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and raw bits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in a.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for bits in a.to_bits() {
                h.update(bits.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same names and shapes as `self`, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new(self.seed);
        for (n, a) in self.iter() {
            out.insert(n, Array::zeros(a.shape()));
        }
        out
    }
}

/// Seeded initializer for layer parameters.
pub struct Initializer {
    rng: ChaCha8Rng,
}

/// Negative slope of the leaky rectifier used throughout.
pub const LEAKY_SLOPE: f32 = 0.2;

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Kaiming-normal weights with fan-in scaling for a leaky rectifier.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Array {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let std = gain / (fan_in.max(1) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        Array::from_fn(shape, |_| normal.sample(&mut self.rng))
    }

    /// Conv weight `[k, k, cin, cout]` plus zero bias.
    pub fn conv(&mut self, store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize) {
        store.insert(format!("{name}.w"), self.kaiming(&[k, k, cin, cout], k * k * cin));
        store.insert(format!("{name}.b"), Array::zeros(&[cout]));
    }

    /// Transposed-conv weight `[k, k, cout, cin]` plus zero bias.
    ///
    /// Fan-in counts the input taps that reach one output pixel on average.
    pub fn conv_transpose(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        k: usize,
        stride: usize,
        cin: usize,
        cout: usize,
    ) {
        let fan_in = (k * k * cin).div_ceil(stride * stride);
        store.insert(format!("{name}.w"), self.kaiming(&[k, k, cout, cin], fan_in));
        store.insert(format!("{name}.b"), Array::zeros(&[cout]));
    }

    /// Dense weight `[in, out]` plus zero bias.
    pub fn dense(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        store.insert(format!("{name}.w"), self.kaiming(&[fan_in, fan_out], fan_in));
        store.insert(format!("{name}.b"), Array::zeros(&[fan_out]));
    }
}
