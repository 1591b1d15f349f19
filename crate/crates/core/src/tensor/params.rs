use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{FusionError, Result};
use crate::rng::FusionRng;

/// Gain for layers followed by relu.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Zero-mean uniform tensor with variance `gain² / fan_in`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, gain: f64, rng: &mut FusionRng) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data length")
}

/// Ordered, named group of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Appends `<name>.w` (`fan_in×fan_out`, fan-in uniform) and a zero `<name>.b`.
    pub fn push_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut FusionRng) {
        self.push(format!("{name}.w"), uniform_fan_in(&[fan_in, fan_out], fan_in, gain, rng));
        self.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Appends a `filters×channels×k×k` kernel and a zero per-filter bias.
    pub fn push_conv(&mut self, name: &str, channels: usize, filters: usize, k: usize, gain: f64, rng: &mut FusionRng) {
        let fan_in = channels * k * k;
        self.push(format!("{name}.w"), uniform_fan_in(&[filters, channels, k, k], fan_in, gain, rng));
        self.push(format!("{name}.b"), Tensor::zeros(&[filters]));
    }

    /// Iterates all tensors mutably, for optimizers.
    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Tensor> {
        self.tensors.iter_mut()
    }

    /// Records every tensor as a leaf; gradients are tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(&t.clone().with_requires_grad(true))
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Gradients of bound leaves, zero-filled where backward never reached.
    pub fn collect_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, v)| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    /// Replaces all values, checking shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(FusionError::Dimension(
                "parameter sets have different layouts".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
