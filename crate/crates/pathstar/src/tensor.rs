use crate::error::{Error, Result};
use crate::num::Real;
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major tensor. `grad` is populated by the optimizer loop pulling
/// gradients off a tape; it accumulates across calls until explicitly zeroed.
#[derive(Debug, Clone)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::BadShape {
                op: "from_vec",
                expected: format!("{n} elements"),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init, mean 0, std `std`. Draws f64 from the stream and rounds,
    /// so an f32 and an f64 model from the same stream hold the same values.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark as a trainable parameter (gradient buffer allocated lazily).
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Add a tape gradient into this tensor's accumulator.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.data.len());
        let buf = self
            .grad
            .get_or_insert_with(|| vec![F::ZERO; self.data.len()]);
        for (a, &b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(F::ZERO);
        }
    }
}
