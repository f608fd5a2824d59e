use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered parameter set. Values are reference counted so a tape can
/// borrow them without copying; `get_mut` copies on write only when a tape
/// still holds a reference.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Entries drawn from N(0, std²).
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.normal() * std;
        }
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.values[id.0] = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), &**v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}
