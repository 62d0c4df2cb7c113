use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable array stored as plain values.
///
/// Forward passes bind parameters into fresh leaf tensors, so the stored
/// values stay `Send + Sync` and can be shared across evaluation threads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Param { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Entries drawn from N(0, std²).
    pub fn normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Param {
            shape,
            data: (0..len).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn bind(&self) -> Tensor {
        Tensor::param(self.shape.clone(), self.data.clone()).expect("param shape is consistent")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A model whose trainable arrays can be enumerated in a fixed order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(&'static str, &Param)>;
    fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Param)>;
}

/// Reads the gradients of bound leaves, substituting zeros for leaves the
/// loss never reached.
pub fn collect_grads(bound: &[Tensor]) -> Vec<Vec<f64>> {
    bound
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}
