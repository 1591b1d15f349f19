use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::rng::FusionRng;
use crate::tensor::Tensor;

/// Fixed-capacity reservoir of `(image, label)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    seen: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity.min(1 << 16)),
            labels: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of stream examples offered so far.
    pub fn seen_count(&self) -> usize {
        self.seen
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    /// Reservoir step: append while not full, otherwise overwrite slot
    /// `j ~ U[0, seen]` when `j < capacity`.
    pub fn insert(&mut self, image: &[f64], label: usize, rng: &mut FusionRng) {
        if self.seen < self.capacity {
            self.images.push(image.to_vec());
            self.labels.push(label);
        } else if self.capacity > 0 {
            let j = rng.random_range(0..=self.seen);
            if j < self.capacity {
                self.images[j].copy_from_slice(image);
                self.labels[j] = label;
            }
        }
        self.seen += 1;
    }

    /// Up to `k` distinct stored items as an `n×item_shape` batch; `None` when empty.
    pub fn sample(&self, k: usize, item_shape: &[usize], rng: &mut FusionRng) -> Result<Option<(Tensor, Vec<usize>)>> {
        if self.is_empty() || k == 0 {
            return Ok(None);
        }
        let picks = index::sample(rng, self.len(), k.min(self.len())).into_vec();
        let items: Vec<&[f64]> = picks.iter().map(|&i| self.images[i].as_slice()).collect();
        let labels = picks.iter().map(|&i| self.labels[i]).collect();
        Ok(Some((Tensor::stack(&items, item_shape)?, labels)))
    }
}

pub fn reservoir_insert(buffer: &mut ReplayBuffer, image: &[f64], label: usize, rng: &mut FusionRng) {
    buffer.insert(image, label, rng);
}
