//! Named parameter tensors shared by every model component.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Buffers such as normalization running statistics are stored alongside
    /// trainable weights but never receive optimizer updates.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Order is the registration order and
/// is also the checkpoint manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value: round_f32(value), trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries.iter().filter(|e| e.trainable || !trainable_only).map(|e| e.value.len()).sum()
    }

    /// Replaces every value with the matching entry of `other`, checking that
    /// names and shapes line up exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: expected {}, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name {
                return Err(Error::Shape(format!(
                    "parameter name mismatch: expected {}, found {}",
                    mine.name, theirs.name
                )));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} expects shape {:?}, found {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.value.shape()
                )));
            }
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    /// Rounds all values to the nearest `f32`. Weights are kept at `f32`
    /// precision so checkpoints store them losslessly.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for x in e.value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

fn round_f32(mut m: Matrix) -> Matrix {
    for x in m.data_mut() {
        *x = *x as f32 as f64;
    }
    m
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut child = ParamBuilder { store: self.store, rng: self.rng, prefix };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform Glorot initialization for a `fan_in x fan_out` weight.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-limit..limit)).collect();
        let full = self.full_name(name);
        self.store.register(full, Matrix::from_vec(fan_in, fan_out, data), true)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        let full = self.full_name(name);
        self.store.register(full, Matrix::from_vec(rows, cols, data), true)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.register(full, Matrix::filled(rows, cols, value), true)
    }

    pub fn buffer(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.register(full, Matrix::filled(rows, cols, value), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_prefixes_names_and_is_seeded() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            b.scoped("video", |b| b.scoped("input", |b| b.glorot("w", 3, 4)));
            store
        };
        let a = build(1);
        assert_eq!(a.entries()[0].name, "video.input.w");
        assert_eq!(a, build(1));
        assert_ne!(a, build(2));
    }

    #[test]
    fn load_from_rejects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.register("w", Matrix::zeros(2, 2), true);
        let mut b = ParamStore::new();
        b.register("w", Matrix::zeros(3, 2), true);
        assert!(matches!(a.load_from(&b), Err(Error::Shape(_))));
    }
}
