//! Differentiable primitives. Each op has a forward value and a hand-derived
//! gradient; nothing here differentiates numerically.

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};

/// Variance floor below which a vector is treated as constant.
pub const VARIANCE_EPS: f64 = 1e-12;
/// Probability floor applied to the second argument of a KL divergence.
pub const PROB_EPS: f64 = 1e-12;

/// A scalar together with its gradient with respect to a declared input.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Temperature-softened softmax with max subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "softmax input contains NaN or Inf".into(),
        ));
    }
    Ok(softmax_unchecked(logits, tau))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Pulls a gradient on `softmax_temp(z, tau)` back onto `z`.
pub fn softmax_temp_backward(probs: &[f64], grad_probs: &[f64], tau: f64) -> Vec<f64> {
    let inner = dot(probs, grad_probs);
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner) / tau)
        .collect()
}

/// Row-wise `softmax_temp`.
pub fn softmax_rows(m: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    if m.cols() == 0 {
        return Err(Error::InvalidInput("softmax over zero columns".into()));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&softmax_unchecked(m.row(r), tau));
    }
    Ok(out)
}

/// Row-wise backward of [`softmax_rows`].
pub fn softmax_rows_backward(probs: &Matrix, grad: &Matrix, tau: f64) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        out.row_mut(r)
            .copy_from_slice(&softmax_temp_backward(probs.row(r), grad.row(r), tau));
    }
    out
}

fn check_pair(u: &[f64], v: &[f64], what: &str) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "{what}: length mismatch ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// `1 − ρ(u, v)`. Constant vectors have no correlation and give 1.
pub fn pearson_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    pearson_distance_with_grad(u, v).map(|d| d.value)
}

/// Pearson distance with its gradient with respect to `u`.
pub fn pearson_distance_with_grad(u: &[f64], v: &[f64]) -> Result<DualValue> {
    check_pair(u, v, "pearson_distance")?;
    if u.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson_distance needs vectors of length >= 2".into(),
        ));
    }
    let n = u.len() as f64;
    let cu = centered(u);
    let cv = centered(v);
    let su = dot(&cu, &cu);
    let sv = dot(&cv, &cv);
    if su / n < VARIANCE_EPS || sv / n < VARIANCE_EPS {
        return Ok(DualValue {
            value: 1.0,
            gradient: vec![0.0; u.len()],
        });
    }
    let nu = su.sqrt();
    let nv = sv.sqrt();
    let rho = (dot(&cu, &cv) / (nu * nv)).clamp(-1.0, 1.0);
    // dρ/du = v̂/(‖û‖‖v̂‖) − ρ·û/‖û‖²; both terms already sum to zero.
    let gradient = cu
        .iter()
        .zip(&cv)
        .map(|(a, b)| -(b / (nu * nv) - rho * a / su))
        .collect();
    Ok(DualValue {
        value: 1.0 - rho,
        gradient,
    })
}

/// `KL(p ‖ q)` with `q` floored at [`PROB_EPS`] and `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    kl_divergence_with_grad(p, q).map(|d| d.value)
}

/// KL divergence with its gradient with respect to `q`.
pub fn kl_divergence_with_grad(p: &[f64], q: &[f64]) -> Result<DualValue> {
    check_pair(p, q, "kl_divergence")?;
    if p.iter().chain(q).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(
            "kl_divergence needs finite nonnegative entries".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "kl_divergence: p sums to {total}, not 1"
        )));
    }
    let mut value = 0.0;
    let mut gradient = vec![0.0; q.len()];
    for ((pi, qi), gi) in p.iter().zip(q).zip(gradient.iter_mut()) {
        if *pi == 0.0 {
            continue;
        }
        let floored = qi.max(PROB_EPS);
        value += pi * (pi / floored).ln();
        if *qi >= PROB_EPS {
            *gi = -pi / qi;
        }
    }
    Ok(DualValue { value, gradient })
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Scales every row to unit Euclidean norm. Returns the normalized matrix
/// and the original row norms.
pub fn l2_normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if n == 0.0 {
            return Err(Error::DegenerateRepresentation { row: r });
        }
        out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of [`l2_normalize_rows`]: `(g − x̂(x̂·g)) / ‖x‖` per row.
pub fn l2_normalize_rows_backward(normalized: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(normalized.rows(), normalized.cols());
    for (r, &norm) in norms.iter().enumerate() {
        let xh = normalized.row(r);
        let g = grad.row(r);
        let proj = dot(xh, g);
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(xh).zip(g) {
            *o = (b - a * proj) / norm;
        }
    }
    out
}

/// Gaussian error linear unit, exact erf form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
