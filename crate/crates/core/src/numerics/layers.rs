use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};

/// Anything that owns trainable tensors.
///
/// A gradient for a model is another value of the same type, so
/// `parameters()` on the gradient lines up slice-for-slice with the model.
pub trait Parameters {
    fn parameters(&self) -> Vec<&[f64]>;
    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.parameters().concat()
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.parameters_mut().into_iter().zip(other.parameters()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale_all(&mut self, s: f64) {
        for p in self.parameters_mut() {
            p.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Uniform in ±√(6/(fan_in + fan_out)).
pub fn glorot_uniform<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit))
}

/// `y = W·x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::InvalidInput(format!(
                "bias length {} does not match output width {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(output, input, rng),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        (0..self.output_dim())
            .map(|o| dot(self.weight.row(o), x) + self.bias[o])
            .collect()
    }

    /// Row-batched forward: `X·Wᵀ + b`.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_transposed(&self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    /// Returns `(dX, grads)` for upstream gradient `dY`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> (Matrix, Linear) {
        let grad_in = grad_out.matmul(&self.weight);
        let weight = grad_out.transposed_matmul(x);
        let mut bias = vec![0.0; self.output_dim()];
        for r in 0..grad_out.rows() {
            for (b, g) in bias.iter_mut().zip(grad_out.row(r)) {
                *b += g;
            }
        }
        (grad_in, Linear { weight, bias })
    }
}

impl Parameters for Linear {
    fn parameters(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = glorot_uniform(8, 4, &mut rng);
        let limit = 0.5f64.sqrt(); // sqrt(6/12)
        assert!(w.as_slice().iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layer = Linear::glorot(3, 2, &mut rng);
            layer.bias = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let x = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
            let w = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let (dx, grads) = layer.backward(&x, &w);

            let base = layer.flatten();
            let numeric = central_difference(
                |flat| {
                    let mut l = layer.clone();
                    l.load_flat(flat);
                    dot(l.forward(&x).as_slice(), w.as_slice())
                },
                &base,
                1e-6,
            );
            assert!(max_relative_error(&grads.flatten(), &numeric) <= 1e-4);

            let numeric_x = central_difference(
                |flat| {
                    let xm = Matrix::new(4, 3, flat.to_vec()).unwrap();
                    dot(layer.forward(&xm).as_slice(), w.as_slice())
                },
                x.as_slice(),
                1e-6,
            );
            assert!(max_relative_error(dx.as_slice(), &numeric_x) <= 1e-4);
        }
    }
}
