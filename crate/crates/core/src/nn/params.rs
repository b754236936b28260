use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// A parameter pinned to its value (e.g. a fixed fusion scalar).
    Fixed,
    /// Non-parameter state such as normalisation running statistics.
    Buffer,
}

/// Named, ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        tensor.set_requires_grad(kind == ParamKind::Trainable);
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.find(name).map(|id| self.tensor(id))
    }

    /// Overwrites the values of an existing tensor, keeping its kind.
    pub fn set_values(&mut self, name: &str, values: &[T]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("no parameter named '{name}'")))?;
        let t = self.tensor_mut(id);
        if t.numel() != values.len() {
            return Err(Error::dim(
                "set_values",
                format!("'{name}' holds {} values, got {}", t.numel(), values.len()),
            ));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Number of parameter elements (trainable or fixed), excluding buffers.
    pub fn parameter_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.kind(id) != ParamKind::Buffer)
            .map(|id| self.tensor(id).numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(&self.tensors)
            .map(|((n, &k), t)| (n.as_str(), k, t))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, kind, t) in self.iter() {
            out.add(name, t.cast(), kind).expect("names are unique");
        }
        out
    }
}

/// 64-bit FNV-1a, used to derive per-parameter random streams from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Fan-in scaled uniform initialisation, `U(−1/√fan_in, 1/√fan_in)`.
///
/// Each tensor draws from its own stream keyed by `(seed, name)`, so adding
/// or resizing one parameter never shifts the values of another.
pub fn init_uniform<T: Real>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape has no zero extent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_stream_depends_only_on_name() {
        let a = init_uniform::<f64>(7, "x.weight", &[4, 3], 3);
        let b = init_uniform::<f64>(7, "x.weight", &[4, 3], 3);
        let c = init_uniform::<f64>(7, "y.weight", &[4, 3], 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn kinds_control_requires_grad() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("w", Tensor::zeros(&[2]), ParamKind::Trainable).unwrap();
        let f = s.add("f", Tensor::zeros(&[1]), ParamKind::Fixed).unwrap();
        let r = s.add("r", Tensor::zeros(&[2]), ParamKind::Buffer).unwrap();
        assert!(s.tensor(w).requires_grad());
        assert!(!s.tensor(f).requires_grad());
        assert!(!s.tensor(r).requires_grad());
        assert_eq!(s.parameter_count(), 3);
        assert!(s.add("w", Tensor::zeros(&[1]), ParamKind::Trainable).is_err());
    }
}
