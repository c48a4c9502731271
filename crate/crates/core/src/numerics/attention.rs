//! Multi-head scaled dot-product self-attention with an explicit backward pass.
//!
//! Scores are scaled by `1/√(d/heads)` and no mask is applied. The key
//! projection carries no bias: softmax is invariant to a per-query constant,
//! so a key bias would have an identically zero gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{glorot_uniform, Linear, Parameters};
use super::matrix::{dot, Matrix};
use super::ops::softmax_unchecked;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    /// `d × d`, bias-free.
    pub key: Matrix,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Intermediate values kept by [`MultiHeadAttention::forward_cached`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    tokens: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One `T × T` weight matrix per head.
    weights: Vec<Matrix>,
    mixed: Matrix,
}

impl AttentionCache {
    pub fn attention_weights(&self) -> &[Matrix] {
        &self.weights
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model dimension {dim} is not divisible by {heads} attention heads"
        )));
    }
    Ok(())
}

impl MultiHeadAttention {
    pub fn glorot<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            query: Linear::glorot(dim, dim, rng),
            key: glorot_uniform(dim, dim, rng),
            value: Linear::glorot(dim, dim, rng),
            output: Linear::glorot(dim, dim, rng),
            heads,
        })
    }

    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            query: Linear::zeros(dim, dim),
            key: Matrix::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
            heads,
        })
    }

    /// All four projections set to the identity with zero bias.
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        let id = || Linear::new(Matrix::identity(dim), vec![0.0; dim]).expect("square identity");
        Ok(Self {
            query: id(),
            key: Matrix::identity(dim),
            value: id(),
            output: id(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(&self, tokens: &Matrix) -> Result<Matrix> {
        self.forward_cached(tokens).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, tokens: &Matrix) -> Result<(Matrix, AttentionCache)> {
        check_heads(self.dim(), self.heads)?;
        if tokens.cols() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "token width {} does not match attention dimension {}",
                tokens.cols(),
                self.dim()
            )));
        }
        if tokens.rows() == 0 {
            return Err(Error::InvalidInput("attention over zero tokens".into()));
        }
        let t = tokens.rows();
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let q = self.query.forward(tokens);
        let k = tokens.matmul_transposed(&self.key);
        let v = self.value.forward(tokens);
        let mut mixed = Matrix::zeros(t, self.dim());
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * hd..(h + 1) * hd;
            let mut w = Matrix::zeros(t, t);
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| dot(&q.row(i)[cols.clone()], &k.row(j)[cols.clone()]) * scale)
                    .collect();
                let a = softmax_unchecked(&scores, 1.0);
                w.row_mut(i).copy_from_slice(&a);
                let out = &mut mixed.row_mut(i)[cols.clone()];
                for (j, aij) in a.iter().enumerate() {
                    for (o, vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += aij * vj;
                    }
                }
            }
            weights.push(w);
        }
        let out = self.output.forward(&mixed);
        Ok((
            out,
            AttentionCache {
                tokens: tokens.clone(),
                q,
                k,
                v,
                weights,
                mixed,
            },
        ))
    }

    /// Returns the gradient with respect to the input tokens and the
    /// parameter gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        grad_out: &Matrix,
    ) -> (Matrix, MultiHeadAttention) {
        let t = cache.tokens.rows();
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let (d_mixed, g_output) = self.output.backward(&cache.mixed, grad_out);

        let mut dq = Matrix::zeros(t, self.dim());
        let mut dk = Matrix::zeros(t, self.dim());
        let mut dv = Matrix::zeros(t, self.dim());
        for h in 0..self.heads {
            let cols = h * hd..(h + 1) * hd;
            let a = &cache.weights[h];
            for i in 0..t {
                let d_oi = &d_mixed.row(i)[cols.clone()];
                // dA[i][j] = dO_i · V_j
                let da: Vec<f64> = (0..t)
                    .map(|j| dot(d_oi, &cache.v.row(j)[cols.clone()]))
                    .collect();
                for j in 0..t {
                    let aij = a.get(i, j);
                    for (dvj, g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(d_oi) {
                        *dvj += aij * g;
                    }
                }
                let inner = dot(a.row(i), &da);
                for (j, &daj) in da.iter().enumerate() {
                    let ds = a.get(i, j) * (daj - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for (x, kj) in dq.row_mut(i)[cols.clone()]
                        .iter_mut()
                        .zip(&cache.k.row(j)[cols.clone()])
                    {
                        *x += ds * kj;
                    }
                    for (x, qi) in dk.row_mut(j)[cols.clone()]
                        .iter_mut()
                        .zip(&cache.q.row(i)[cols.clone()])
                    {
                        *x += ds * qi;
                    }
                }
            }
        }
        let (mut d_tokens, g_query) = self.query.backward(&cache.tokens, &dq);
        let dt_k = dk.matmul(&self.key);
        let g_key = dk.transposed_matmul(&cache.tokens);
        let (dt_v, g_value) = self.value.backward(&cache.tokens, &dv);
        d_tokens.add_assign(&dt_k);
        d_tokens.add_assign(&dt_v);
        (
            d_tokens,
            MultiHeadAttention {
                query: g_query,
                key: g_key,
                value: g_value,
                output: g_output,
                heads: self.heads,
            },
        )
    }
}

impl Parameters for MultiHeadAttention {
    fn parameters(&self) -> Vec<&[f64]> {
        let mut p = self.query.parameters();
        p.push(self.key.as_slice());
        p.extend(self.value.parameters());
        p.extend(self.output.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.query.parameters_mut();
        p.push(self.key.as_mut_slice());
        p.extend(self.value.parameters_mut());
        p.extend(self.output.parameters_mut());
        p
    }
}
