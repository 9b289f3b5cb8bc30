use crate::error::{Error, Result};

use super::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        self.precision.round_all(tensor.data_mut());
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    /// Mutable access; callers are responsible for keeping the shape intact.
    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.data_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replace a tensor's contents, checking the shape.
    pub fn assign(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("assign", slot.shape(), tensor.shape()));
        }
        slot.data_mut().copy_from_slice(tensor.data());
        self.precision.round_all(slot.data_mut());
        Ok(())
    }
}

/// Dense gradient buffers, one per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    buffers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            buffers: store
                .params
                .iter()
                .map(|p| vec![0.0; p.tensor.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.buffers[id.0]
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in &mut self.buffers {
            for g in buf {
                *g *= factor;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}
