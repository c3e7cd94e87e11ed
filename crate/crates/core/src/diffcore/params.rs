use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{Scalar, Tensor};

/// Named tensors fed to a program as non-trainable inputs.
pub type NamedTensors<T = f32> = BTreeMap<String, Tensor<T>>;

/// Trainable tensors keyed by path. Iteration is lexicographic by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T: Scalar = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts or replaces the tensor at `path`.
    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(path.into(), t)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.entries.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn convert<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.convert()))
                .collect(),
        }
    }

    /// Parameters whose path starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor<T>)> {
        self.entries.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().map(|v| v.f64().abs()))
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParameterSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Weight matrix `[fan_in, fan_out]` drawn from `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Registers `{prefix}.w` (uniform init) and `{prefix}.b` (zeros).
pub fn init_linear<R: Rng>(ps: &mut ParameterSet, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{prefix}.w"), uniform_weight(rng, fan_in, fan_out));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}
