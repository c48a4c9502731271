//! Attention-based modality shifting fusion.
//!
//! The student embeddings are stacked as a short token sequence (audio then
//! visual) and passed through multi-head self-attention; the flattened
//! output is the non-verbal vector. A ReLU gate computed from the teacher
//! embedding and the non-verbal vector selects a displacement `H`, and the
//! teacher embedding is shifted by `λ·H` with
//! `λ = min(θ·‖F_T‖ / ‖H‖, 1)` (λ = 0 when `H` vanishes).
//!
//! [`ConcatHead`] is the plain concatenation baseline used in ablations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{cross_entropy_with_grad, ClassifierHead};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, relu, Linear, Matrix, MultiHeadAttention, Parameters};

/// Below this norm the displacement is treated as zero.
pub const DISPLACEMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Shift the teacher embedding; when false, classify the concatenated
    /// embeddings instead.
    pub asf: bool,
    pub heads: usize,
    pub theta: f64,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            asf: true,
            heads: 4,
            theta: 0.1,
            dropout: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.heads == 0 || !embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dimension {embed_dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub attention: MultiHeadAttention,
    /// `W1, b1`: `(d + k·d) → d`, where `k` is the number of non-verbal tokens.
    pub gate: Linear,
    /// `W2, b2`: `k·d → d`.
    pub displacement: Linear,
    pub classifier: ClassifierHead,
    pub theta: f64,
    pub dropout: f64,
}

/// Per-utterance record of a shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTrace {
    pub f_attention: Vec<f64>,
    pub gate: Vec<f64>,
    pub displacement: Vec<f64>,
    pub lambda: f64,
    pub fused: Vec<f64>,
}

/// Dropout on the fused vector: off for evaluation, on with an explicit
/// random stream for training.
pub enum Dropout<'a> {
    Disabled,
    Enabled(&'a mut ChaCha8Rng),
}

/// How λ was obtained; decides which branch the backward pass takes.
#[derive(Debug, Clone, Copy, PartialEq)]
enum LambdaRegime {
    ZeroDisplacement,
    Scaled {
        teacher_norm: f64,
        displacement_norm: f64,
    },
    Saturated,
}

/// Forward intermediates for one utterance.
pub struct FusionCache {
    teacher: Vec<f64>,
    attention: crate::numerics::AttentionCache,
    gate_input: Vec<f64>,
    gate_pre: Vec<f64>,
    trace: ShiftTrace,
    disp_raw: Vec<f64>,
    regime: LambdaRegime,
    dropout_mask: Option<Vec<f64>>,
    classifier_input: Vec<f64>,
}

/// Gradients for one forward pass: parameter grads plus input grads.
pub struct FusionGrads {
    pub params: FusionParams,
    pub teacher: Vec<f64>,
    pub nonverbal: Vec<Vec<f64>>,
}

impl FusionParams {
    /// Glorot-initialized attention, gate and displacement maps with zero
    /// biases. `classifier` is supplied by the caller.
    pub fn glorot<R: Rng + ?Sized>(
        embed_dim: usize,
        nonverbal_tokens: usize,
        classifier: ClassifierHead,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(embed_dim)?;
        check_tokens(nonverbal_tokens)?;
        let k = nonverbal_tokens;
        Ok(Self {
            attention: MultiHeadAttention::glorot(embed_dim, cfg.heads, rng)?,
            gate: Linear::glorot(embed_dim + k * embed_dim, embed_dim, rng),
            displacement: Linear::glorot(k * embed_dim, embed_dim, rng),
            classifier,
            theta: cfg.theta,
            dropout: cfg.dropout,
        })
    }

    /// Every trainable tensor zero.
    pub fn zeros(
        embed_dim: usize,
        nonverbal_tokens: usize,
        num_classes: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        cfg.validate(embed_dim)?;
        check_tokens(nonverbal_tokens)?;
        let k = nonverbal_tokens;
        Ok(Self {
            attention: MultiHeadAttention::zeros(embed_dim, cfg.heads)?,
            gate: Linear::zeros(embed_dim + k * embed_dim, embed_dim),
            displacement: Linear::zeros(k * embed_dim, embed_dim),
            classifier: ClassifierHead::zeros(embed_dim, num_classes),
            theta: cfg.theta,
            dropout: cfg.dropout,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.attention.dim()
    }

    pub fn nonverbal_tokens(&self) -> usize {
        self.displacement.input_dim() / self.embed_dim()
    }

    fn check_inputs(&self, teacher: &[f64], nonverbal: &[&[f64]]) -> Result<()> {
        let d = self.embed_dim();
        if teacher.len() != d {
            return Err(Error::InvalidInput(format!(
                "teacher embedding has {} entries, expected {d}",
                teacher.len()
            )));
        }
        if nonverbal.len() != self.nonverbal_tokens() {
            return Err(Error::InvalidInput(format!(
                "fusion expects {} non-verbal embeddings, got {}",
                self.nonverbal_tokens(),
                nonverbal.len()
            )));
        }
        if let Some(bad) = nonverbal.iter().find(|e| e.len() != d) {
            return Err(Error::InvalidInput(format!(
                "non-verbal embedding has {} entries, expected {d}",
                bad.len()
            )));
        }
        Ok(())
    }

    /// Self-attention over the student embeddings, flattened in token order.
    pub fn nonverbal_attend(&self, nonverbal: &[&[f64]]) -> Result<Vec<f64>> {
        let d = self.embed_dim();
        if nonverbal.len() != self.nonverbal_tokens() || nonverbal.iter().any(|e| e.len() != d) {
            return Err(Error::InvalidInput(format!(
                "fusion expects {} non-verbal embeddings of width {d}",
                self.nonverbal_tokens()
            )));
        }
        let tokens = Matrix::from_rows(nonverbal)?;
        Ok(self.attention.forward(&tokens)?.into_vec())
    }

    /// Gates the non-verbal vector against the teacher embedding and shifts
    /// the teacher embedding by the clamped displacement.
    pub fn shift(&self, teacher: &[f64], f_attention: &[f64]) -> Result<ShiftTrace> {
        let d = self.embed_dim();
        if teacher.len() != d || f_attention.len() != self.displacement.input_dim() {
            return Err(Error::InvalidInput(format!(
                "shift expects a {d}-dim teacher embedding and a {}-dim non-verbal vector",
                self.displacement.input_dim()
            )));
        }
        Ok(self.shift_inner(teacher, f_attention).0)
    }

    fn shift_inner(
        &self,
        teacher: &[f64],
        f_attention: &[f64],
    ) -> (ShiftTrace, Vec<f64>, Vec<f64>, Vec<f64>, LambdaRegime) {
        let gate_input: Vec<f64> = teacher.iter().chain(f_attention).copied().collect();
        let gate_pre = self.gate.forward_vec(&gate_input);
        let gate: Vec<f64> = gate_pre.iter().map(|&x| relu(x)).collect();
        let disp_raw = self.displacement.forward_vec(f_attention);
        let displacement: Vec<f64> = gate.iter().zip(&disp_raw).map(|(g, w)| g * w).collect();

        let h_norm = l2_norm(&displacement);
        let t_norm = l2_norm(teacher);
        let (lambda, regime) = if h_norm < DISPLACEMENT_EPS {
            (0.0, LambdaRegime::ZeroDisplacement)
        } else {
            let scaled = t_norm / h_norm * self.theta;
            if scaled >= 1.0 {
                (1.0, LambdaRegime::Saturated)
            } else {
                (
                    scaled,
                    LambdaRegime::Scaled {
                        teacher_norm: t_norm,
                        displacement_norm: h_norm,
                    },
                )
            }
        };
        let fused = teacher
            .iter()
            .zip(&displacement)
            .map(|(t, h)| t + lambda * h)
            .collect();
        (
            ShiftTrace {
                f_attention: f_attention.to_vec(),
                gate,
                displacement,
                lambda,
                fused,
            },
            gate_input,
            gate_pre,
            disp_raw,
            regime,
        )
    }

    /// Attend, shift, drop out (training only) and classify.
    pub fn fuse_and_classify(
        &self,
        teacher: &[f64],
        nonverbal: &[&[f64]],
        dropout: Dropout<'_>,
    ) -> Result<(Vec<f64>, ShiftTrace)> {
        let (logits, cache) = self.forward_cached(teacher, nonverbal, dropout)?;
        Ok((logits, cache.trace))
    }

    pub fn forward_cached(
        &self,
        teacher: &[f64],
        nonverbal: &[&[f64]],
        dropout: Dropout<'_>,
    ) -> Result<(Vec<f64>, FusionCache)> {
        self.check_inputs(teacher, nonverbal)?;
        let tokens = Matrix::from_rows(nonverbal)?;
        let (att_out, att_cache) = self.attention.forward_cached(&tokens)?;
        let f_attention = att_out.into_vec();
        let (trace, gate_input, gate_pre, disp_raw, regime) =
            self.shift_inner(teacher, &f_attention);

        let (classifier_input, dropout_mask) = match dropout {
            Dropout::Enabled(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..trace.fused.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let dropped = trace.fused.iter().zip(&mask).map(|(z, m)| z * m).collect();
                (dropped, Some(mask))
            }
            _ => (trace.fused.clone(), None),
        };
        let logits = self.classifier.classify(&classifier_input)?;
        Ok((
            logits,
            FusionCache {
                teacher: teacher.to_vec(),
                attention: att_cache,
                gate_input,
                gate_pre,
                trace,
                disp_raw,
                regime,
                dropout_mask,
                classifier_input,
            },
        ))
    }

    /// Gradients of a scalar whose gradient with respect to the logits is
    /// `grad_logits`.
    pub fn backward(&self, cache: &FusionCache, grad_logits: &[f64]) -> FusionGrads {
        let d = self.embed_dim();
        let k = self.nonverbal_tokens();
        let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec()).expect("finite");

        let (d_cls_in, g_classifier) = self
            .classifier
            .backward(&row(&cache.classifier_input), &row(grad_logits));
        let mut d_fused = d_cls_in.into_vec();
        if let Some(mask) = &cache.dropout_mask {
            d_fused.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }

        let trace = &cache.trace;
        let lambda = trace.lambda;
        let mut d_teacher = d_fused.clone();
        let mut d_disp: Vec<f64> = d_fused.iter().map(|g| lambda * g).collect();
        if let LambdaRegime::Scaled {
            teacher_norm,
            displacement_norm,
        } = cache.regime
        {
            let d_lambda = dot(&d_fused, &trace.displacement);
            if teacher_norm > 0.0 {
                let c = d_lambda * self.theta / (displacement_norm * teacher_norm);
                d_teacher
                    .iter_mut()
                    .zip(&cache.teacher)
                    .for_each(|(g, t)| *g += c * t);
            }
            let c = -d_lambda * lambda / (displacement_norm * displacement_norm);
            d_disp
                .iter_mut()
                .zip(&trace.displacement)
                .for_each(|(g, h)| *g += c * h);
        }

        // H = relu(gate_pre) ⊙ disp_raw
        let d_gate_pre: Vec<f64> = d_disp
            .iter()
            .zip(&cache.disp_raw)
            .zip(&cache.gate_pre)
            .map(|((g, w), z)| if *z > 0.0 { g * w } else { 0.0 })
            .collect();
        let d_disp_raw: Vec<f64> = d_disp.iter().zip(&trace.gate).map(|(g, a)| g * a).collect();

        let (d_gate_in, g_gate) = self
            .gate
            .backward(&row(&cache.gate_input), &row(&d_gate_pre));
        let (d_att_from_disp, g_disp) = self
            .displacement
            .backward(&row(&trace.f_attention), &row(&d_disp_raw));
        let d_gate_in = d_gate_in.into_vec();
        d_teacher
            .iter_mut()
            .zip(&d_gate_in[..d])
            .for_each(|(g, x)| *g += x);
        let d_att: Vec<f64> = d_gate_in[d..]
            .iter()
            .zip(d_att_from_disp.as_slice())
            .map(|(a, b)| a + b)
            .collect();
        let d_att = Matrix::new(k, d, d_att).expect("finite");
        let (d_tokens, g_attention) = self.attention.backward(&cache.attention, &d_att);

        FusionGrads {
            params: FusionParams {
                attention: g_attention,
                gate: g_gate,
                displacement: g_disp,
                classifier: g_classifier,
                theta: self.theta,
                dropout: self.dropout,
            },
            teacher: d_teacher,
            nonverbal: (0..k).map(|i| d_tokens.row(i).to_vec()).collect(),
        }
    }
}

impl FusionCache {
    pub fn trace(&self) -> &ShiftTrace {
        &self.trace
    }

    /// Per-head attention weights of the non-verbal self-attention.
    pub fn attention_weights(&self) -> &[Matrix] {
        self.attention.attention_weights()
    }
}

fn check_tokens(k: usize) -> Result<()> {
    if k == 0 || k > 2 {
        return Err(Error::Config(format!(
            "fusion takes one or two non-verbal embeddings, got {k}"
        )));
    }
    Ok(())
}

impl Parameters for FusionParams {
    fn parameters(&self) -> Vec<&[f64]> {
        let mut p = self.attention.parameters();
        p.extend(self.gate.parameters());
        p.extend(self.displacement.parameters());
        p.extend(self.classifier.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.attention.parameters_mut();
        p.extend(self.gate.parameters_mut());
        p.extend(self.displacement.parameters_mut());
        p.extend(self.classifier.parameters_mut());
        p
    }
}

/// Linear classifier over the concatenated embeddings `[F_T; F_1; ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatHead {
    pub classifier: ClassifierHead,
}

impl ConcatHead {
    pub fn glorot<R: Rng + ?Sized>(
        embed_dim: usize,
        parts: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            classifier: ClassifierHead::glorot(parts * embed_dim, num_classes, rng),
        }
    }

    pub fn classify(&self, parts: &[&[f64]]) -> Result<Vec<f64>> {
        self.classifier.classify(&parts.concat())
    }
}

impl Parameters for ConcatHead {
    fn parameters(&self) -> Vec<&[f64]> {
        self.classifier.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.classifier.parameters_mut()
    }
}

/// Mean cross entropy of fused predictions over a batch and the summed
/// parameter gradient. Used by fusion training and by gradient checks.
pub fn fusion_batch_loss(
    params: &FusionParams,
    teacher: &Matrix,
    nonverbal: &[&Matrix],
    labels: &[usize],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, FusionParams, Vec<usize>)> {
    let b = teacher.rows();
    let mut logits = Matrix::zeros(b, params.classifier.num_classes());
    let mut caches = Vec::with_capacity(b);
    for i in 0..b {
        let nv: Vec<&[f64]> = nonverbal.iter().map(|m| m.row(i)).collect();
        let dropout = match dropout_rng.as_deref_mut() {
            Some(rng) => Dropout::Enabled(rng),
            None => Dropout::Disabled,
        };
        let (l, cache) = params.forward_cached(teacher.row(i), &nv, dropout)?;
        logits.row_mut(i).copy_from_slice(&l);
        caches.push(cache);
    }
    let (loss, d_logits) = cross_entropy_with_grad(&logits, labels)?;
    let mut grads: Option<FusionParams> = None;
    for (i, cache) in caches.iter().enumerate() {
        let g = params.backward(cache, d_logits.row(i)).params;
        match grads.as_mut() {
            Some(acc) => acc.accumulate(&g),
            None => grads = Some(g),
        }
    }
    let preds = (0..b).map(|i| argmax(logits.row(i))).collect();
    Ok((loss, grads.expect("non-empty batch"), preds))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
