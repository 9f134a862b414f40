use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BnUpdate, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered, named storage for every tensor a model owns: trainable
/// weights plus non-trainable buffers such as batch-norm running stats.
///
/// Registration order is the serialization order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    /// Gaussian-initialised trainable tensor. Each tensor draws from its own
    /// stream keyed by `(seed, name)`, so values do not depend on
    /// construction order.
    pub fn add_gaussian(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        seed: u64,
    ) -> ParamId {
        let name = name.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&name));
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
        self.add(name, Tensor { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Overwrite a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Number of trainable scalars whose names start with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count_with_prefix("")
    }

    /// Fold batch statistics recorded during a train-mode forward into the
    /// running averages: `running = momentum·running + (1−momentum)·batch`.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        for u in updates {
            let m = u.momentum;
            let keep = T::one() - m;
            let mean = self.get_mut(u.running_mean);
            for (r, &b) in mean.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = m * *r + keep * b;
            }
            let var = self.get_mut(u.running_var);
            for (r, &b) in var.data_mut().iter_mut().zip(&u.batch_var) {
                *r = m * *r + keep * b;
            }
        }
    }
}

// FNV-1a, stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
