//! Named, grouped parameter storage shared by all trainable blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Shape, Tensor};

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Encoder,
    Renderer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Flat registry of named parameters in insertion order; the order defines
/// the checkpoint layout and the gradient-check sweep.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    /// Seeded uniform init with fan-in scaling: `U(-a, a)`, `a = sqrt(3/fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let a = (3.0 / fan_in.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::new(shape, data), group)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        group: ParamGroup,
    ) -> ParamId {
        self.add(name, Tensor::zeros(shape), group)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fill: f64,
        group: ParamGroup,
    ) -> ParamId {
        self.add(name, Tensor::new(shape, vec![fill; shape.len()]), group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> GradStore {
        GradStore {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        match &mut self.grads[id.0] {
            Some(buf) => {
                debug_assert_eq!(buf.len(), grad.len());
                for (b, g) in buf.iter_mut().zip(grad) {
                    *b += g;
                }
            }
            slot => *slot = Some(grad.to_vec()),
        }
    }

    /// Adds another accumulator; used for the deterministic chunk reduce.
    pub fn merge(&mut self, other: &GradStore) {
        for (i, grad) in other.grads.iter().enumerate() {
            if let Some(grad) = grad {
                self.accumulate(ParamId(i), grad);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.grads.iter_mut().flatten() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }
}
