use rand::Rng;

use super::Tensor;
use crate::error::{KktError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::raw(shape.to_vec(), data))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::raw(shape.to_vec(), vec![value; n]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites a parameter's values; bumps the version.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(KktError::dim("param set", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        self.version += 1;
        Ok(())
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        self.tensors[id.0].data_mut()
    }

    /// Monotone counter bumped on every mutation, used to invalidate caches
    /// of values derived from the parameters.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Rounds every value to the nearest fp32, the storage precision of
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.version += 1;
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64], scale: f64) {
        for (acc, g) in self.bufs[id.0].iter_mut().zip(grad) {
            *acc += scale * g;
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|x| x.is_finite())
    }
}
