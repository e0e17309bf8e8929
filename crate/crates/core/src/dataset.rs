use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory collection of equally shaped training examples.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    items: Vec<Tensor>,
}

impl Dataset {
    pub fn new(items: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = items.first() {
            for t in &items[1..] {
                t.ensure_same_shape(first)?;
            }
        }
        Ok(Dataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Tensor] {
        &self.items
    }

    pub fn item_shape(&self) -> Option<&[usize]> {
        self.items.first().map(Tensor::shape)
    }

    /// Uniform draw with replacement, stacked along a new batch axis.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Tensor> {
        if self.items.is_empty() {
            return Err(Error::invalid("cannot draw from an empty dataset"));
        }
        let picks: Vec<&Tensor> = (0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect();
        Tensor::stack(&picks)
    }
}
