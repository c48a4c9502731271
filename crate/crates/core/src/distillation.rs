//! Cross-modal distillation losses.
//!
//! The response loss compares softened prediction matrices with Pearson
//! distance, once along each row (relations between classes for one
//! utterance) and once along each column (relations between utterances for
//! one class). The feature loss compares, row by row, the softmax over
//! teacher–teacher similarities with the softmax over student–teacher
//! similarities using KL divergence.
//!
//! Teacher tensors are constants: every gradient returned here is with
//! respect to the student's inputs only.

use serde::{Deserialize, Serialize};

use crate::encoders::cross_entropy_with_grad;
use crate::error::{Error, Result};
use crate::numerics::{
    kl_divergence_with_grad, l2_normalize_rows, l2_normalize_rows_backward,
    pearson_distance_with_grad, softmax_rows, softmax_rows_backward, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_response: f64,
    pub tau_feature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau_response: 2.0,
            tau_feature: 1.0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.beta >= 0.0
            && self.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "balance factors must be finite and nonnegative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        for (name, t) in [
            ("tau_response", self.tau_response),
            ("tau_feature", self.tau_feature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// A loss value with its gradient with respect to the student input.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrad {
    pub value: f64,
    pub grad: Matrix,
}

fn check_same_shape(student: &Matrix, teacher: &Matrix, what: &str) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::InvalidInput(format!(
            "{what}: student shape {:?} differs from teacher shape {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    Ok(())
}

pub fn response_loss(student_logits: &Matrix, teacher_logits: &Matrix, tau: f64) -> Result<f64> {
    response_loss_with_grad(student_logits, teacher_logits, tau).map(|r| r.value)
}

/// Inter-class plus intra-class Pearson distance between softened
/// predictions, each scaled by `τ²` and averaged over its `B` rows or `C`
/// columns.
pub fn response_loss_with_grad(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    tau: f64,
) -> Result<StudentGrad> {
    check_same_shape(student_logits, teacher_logits, "response_loss")?;
    let (b, c) = student_logits.shape();
    if b < 2 || c < 2 {
        return Err(Error::InvalidInput(format!(
            "response_loss needs at least 2 rows and 2 classes, got {b}x{c}"
        )));
    }
    let ys = softmax_rows(student_logits, tau)?;
    let yt = softmax_rows(teacher_logits, tau)?;
    let t2 = tau * tau;

    let mut d_ys = Matrix::zeros(b, c);
    let mut inter = 0.0;
    for i in 0..b {
        let d = pearson_distance_with_grad(ys.row(i), yt.row(i))?;
        inter += d.value;
        for (g, x) in d_ys.row_mut(i).iter_mut().zip(&d.gradient) {
            *g += t2 / b as f64 * x;
        }
    }
    let mut intra = 0.0;
    for j in 0..c {
        let d = pearson_distance_with_grad(&ys.column(j), &yt.column(j))?;
        intra += d.value;
        for (i, x) in d.gradient.iter().enumerate() {
            let cur = d_ys.get(i, j);
            d_ys.set(i, j, cur + t2 / c as f64 * x);
        }
    }
    let value = t2 / b as f64 * inter + t2 / c as f64 * intra;
    Ok(StudentGrad {
        value,
        grad: softmax_rows_backward(&ys, &d_ys, tau),
    })
}

pub fn feature_loss(student_reprs: &Matrix, teacher_reprs: &Matrix, tau: f64) -> Result<f64> {
    feature_loss_with_grad(student_reprs, teacher_reprs, tau).map(|r| r.value)
}

/// Mean over rows of `KL(P_i ‖ Q_i)` where `P` softens the teacher's
/// self-similarity matrix and `Q` the student–teacher similarity matrix.
/// Rows of both inputs are L2-normalized first; the diagonal stays in.
pub fn feature_loss_with_grad(
    student_reprs: &Matrix,
    teacher_reprs: &Matrix,
    tau: f64,
) -> Result<StudentGrad> {
    check_same_shape(student_reprs, teacher_reprs, "feature_loss")?;
    let b = student_reprs.rows();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "feature_loss needs at least 2 rows, got {b}"
        )));
    }
    let (fs, norms) = l2_normalize_rows(student_reprs)?;
    let (ft, _) = l2_normalize_rows(teacher_reprs)?;
    let target = softmax_rows(&ft.matmul_transposed(&ft), tau)?;
    let q = softmax_rows(&fs.matmul_transposed(&ft), tau)?;

    let mut value = 0.0;
    let mut d_q = Matrix::zeros(b, b);
    for i in 0..b {
        let kl = kl_divergence_with_grad(target.row(i), q.row(i))?;
        value += kl.value;
        for (g, x) in d_q.row_mut(i).iter_mut().zip(&kl.gradient) {
            *g = x / b as f64;
        }
    }
    let d_sim = softmax_rows_backward(&q, &d_q, tau);
    let d_fs = d_sim.matmul(&ft);
    Ok(StudentGrad {
        value: value / b as f64,
        grad: l2_normalize_rows_backward(&fs, &norms, &d_fs),
    })
}

/// `cls + α·resp + β·feat`
pub fn student_loss(cls: f64, resp: f64, feat: f64, cfg: &KdConfig) -> f64 {
    cls + cfg.alpha * resp + cfg.beta * feat
}

/// Everything the student objective needs for one batch. Teacher tensors are
/// read, never differentiated.
#[derive(Debug, Clone, Copy)]
pub struct DistillBatch<'a> {
    pub student_logits: &'a Matrix,
    pub teacher_logits: &'a Matrix,
    pub student_reprs: &'a Matrix,
    pub teacher_reprs: &'a Matrix,
    pub labels: &'a [usize],
}

/// Combined student objective with its gradients.
#[derive(Debug, Clone)]
pub struct StudentObjective {
    pub total: f64,
    pub cls: f64,
    /// Zero when `alpha == 0` (the term is not evaluated).
    pub response: f64,
    /// Zero when `beta == 0` (the term is not evaluated).
    pub feature: f64,
    pub grad_logits: Matrix,
    pub grad_reprs: Matrix,
}

pub fn student_objective(batch: &DistillBatch<'_>, cfg: &KdConfig) -> Result<StudentObjective> {
    if batch.student_logits.rows() < 2 {
        return Err(Error::InvalidInput(
            "distillation batches need at least 2 rows".into(),
        ));
    }
    let (cls, mut grad_logits) = cross_entropy_with_grad(batch.student_logits, batch.labels)?;
    let mut grad_reprs = Matrix::zeros(batch.student_reprs.rows(), batch.student_reprs.cols());
    let mut response = 0.0;
    if cfg.alpha > 0.0 {
        let r =
            response_loss_with_grad(batch.student_logits, batch.teacher_logits, cfg.tau_response)?;
        response = r.value;
        grad_logits.add_assign(&r.grad.scale(cfg.alpha));
    }
    let mut feature = 0.0;
    if cfg.beta > 0.0 {
        let f = feature_loss_with_grad(batch.student_reprs, batch.teacher_reprs, cfg.tau_feature)?;
        feature = f.value;
        grad_reprs.add_assign(&f.grad.scale(cfg.beta));
    }
    Ok(StudentObjective {
        total: student_loss(cls, response, feature, cfg),
        cls,
        response,
        feature,
        grad_logits,
        grad_reprs,
    })
}
