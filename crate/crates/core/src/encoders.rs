//! Stub modality encoders and classification heads.
//!
//! An encoder is `input → 2d → d` with a GELU between the two affine layers;
//! teacher and students share the architecture and differ only in input
//! width and in how they are trained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numerics::{gelu, gelu_grad, Linear, Matrix, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubEncoder {
    pub modality: Modality,
    pub hidden: Linear,
    pub output: Linear,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Matrix,
    pre_activation: Matrix,
    activation: Matrix,
}

impl StubEncoder {
    pub fn glorot<R: Rng + ?Sized>(
        modality: Modality,
        input_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            modality,
            hidden: Linear::glorot(input_dim, 2 * embed_dim, rng),
            output: Linear::glorot(2 * embed_dim, embed_dim, rng),
        }
    }

    pub fn zeros(modality: Modality, input_dim: usize, embed_dim: usize) -> Self {
        Self {
            modality,
            hidden: Linear::zeros(input_dim, 2 * embed_dim),
            output: Linear::zeros(2 * embed_dim, embed_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::new(1, input.len(), input.to_vec())?;
        Ok(self.encode_batch(&x)?.into_vec())
    }

    pub fn encode_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward_cached(inputs).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, inputs: &Matrix) -> Result<(Matrix, EncoderCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "{} encoder expects {} input features, got {}",
                self.modality,
                self.input_dim(),
                inputs.cols()
            )));
        }
        let pre_activation = self.hidden.forward(inputs);
        let activation = pre_activation.map(gelu);
        let out = self.output.forward(&activation);
        Ok((
            out,
            EncoderCache {
                input: inputs.clone(),
                pre_activation,
                activation,
            },
        ))
    }

    /// Parameter gradients for upstream gradient `grad_out` (B × d).
    pub fn backward(&self, cache: &EncoderCache, grad_out: &Matrix) -> StubEncoder {
        let (d_act, g_output) = self.output.backward(&cache.activation, grad_out);
        let mut d_pre = d_act;
        for (g, z) in d_pre
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre_activation.as_slice())
        {
            *g *= gelu_grad(*z);
        }
        let (_, g_hidden) = self.hidden.backward(&cache.input, &d_pre);
        StubEncoder {
            modality: self.modality,
            hidden: g_hidden,
            output: g_output,
        }
    }
}

impl Parameters for StubEncoder {
    fn parameters(&self) -> Vec<&[f64]> {
        let mut p = self.hidden.parameters();
        p.extend(self.output.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.hidden.parameters_mut();
        p.extend(self.output.parameters_mut());
        p
    }
}

/// Affine map from an embedding to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn glorot<R: Rng + ?Sized>(embed_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::glorot(embed_dim, num_classes, rng),
        }
    }

    pub fn zeros(embed_dim: usize, num_classes: usize) -> Self {
        Self {
            linear: Linear::zeros(embed_dim, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn classify(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.linear.input_dim() {
            return Err(Error::InvalidInput(format!(
                "classifier expects {}-dim embeddings, got {}",
                self.linear.input_dim(),
                embedding.len()
            )));
        }
        Ok(self.linear.forward_vec(embedding))
    }

    pub fn forward(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols() != self.linear.input_dim() {
            return Err(Error::InvalidInput(format!(
                "classifier expects {}-dim embeddings, got {}",
                self.linear.input_dim(),
                embeddings.cols()
            )));
        }
        Ok(self.linear.forward(embeddings))
    }

    pub fn backward(&self, embeddings: &Matrix, grad_logits: &Matrix) -> (Matrix, ClassifierHead) {
        let (d_emb, linear) = self.linear.backward(embeddings, grad_logits);
        (d_emb, ClassifierHead { linear })
    }
}

impl Parameters for ClassifierHead {
    fn parameters(&self) -> Vec<&[f64]> {
        self.linear.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.linear.parameters_mut()
    }
}

/// An encoder with its classification head: one per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub encoder: StubEncoder,
    pub head: ClassifierHead,
}

impl EncoderModel {
    pub fn glorot<R: Rng + ?Sized>(
        modality: Modality,
        input_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = StubEncoder::glorot(modality, input_dim, embed_dim, rng);
        let head = ClassifierHead::glorot(embed_dim, num_classes, rng);
        Self { encoder, head }
    }

    pub fn modality(&self) -> Modality {
        self.encoder.modality
    }

    /// Embeddings and logits for a batch of inputs.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
        let emb = self.encoder.encode_batch(inputs)?;
        let logits = self.head.forward(&emb)?;
        Ok((emb, logits))
    }
}

impl Parameters for EncoderModel {
    fn parameters(&self) -> Vec<&[f64]> {
        let mut p = self.encoder.parameters();
        p.extend(self.head.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.head.parameters_mut());
        p
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return Err(Error::InvalidInput(
            "cross entropy over an empty batch".into(),
        ));
    }
    if labels.len() != logits.rows() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean over the batch of `−ln softmax(logits_i)[label_i]`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_sum_exp(logits.row(i)) - logits.get(i, y))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Loss and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let b = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        total += lse - row[y];
        for (g, z) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (z - lse).exp() / b;
        }
        grad.row_mut(i)[y] -= 1.0 / b;
    }
    Ok((total / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{central_difference, max_relative_error};
    use crate::numerics::{dot, softmax_temp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let enc = StubEncoder::zeros(Modality::Audio, 5, 4);
        assert_eq!(
            enc.encode(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(enc.hidden.output_dim(), 8);
    }

    #[test]
    fn identity_like_encoder_matches_oracle() {
        let hidden = Linear::new(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap(),
            vec![5.0; 4],
        )
        .unwrap();
        let output = Linear::new(
            Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap(),
            vec![-5.0, -5.0],
        )
        .unwrap();
        let enc = StubEncoder {
            modality: Modality::Text,
            hidden,
            output,
        };
        let out = enc.encode(&[0.3, -0.7]).unwrap();
        assert!((out[0] - 0.29999969312289587).abs() < 1e-9);
        assert!((out[1] - -0.70003672159352522).abs() < 1e-9);
    }

    #[test]
    fn batch_rows_match_single_encodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = StubEncoder::glorot(Modality::Visual, 3, 4, &mut rng);
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let batch = enc.encode_batch(&x).unwrap();
        for r in 0..5 {
            assert_eq!(batch.row(r), enc.encode(x.row(r)).unwrap().as_slice());
        }
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let enc = StubEncoder::zeros(Modality::Audio, 5, 4);
        assert!(matches!(enc.encode(&[1.0]), Err(Error::InvalidInput(_))));
        let head = ClassifierHead::zeros(4, 3);
        assert!(matches!(
            head.classify(&[1.0; 5]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn classify_examples() {
        let head = ClassifierHead::zeros(3, 4);
        let logits = head.classify(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        assert_eq!(softmax_temp(&logits, 1.0).unwrap(), vec![0.25; 4]);

        let selector = ClassifierHead {
            linear: Linear::new(
                Matrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap(),
                vec![0.0, 0.0],
            )
            .unwrap(),
        };
        assert_eq!(selector.classify(&[7.0, 8.0, 9.0]).unwrap(), vec![9.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut head = ClassifierHead::glorot(3, 2, &mut rng);
        head.linear.bias = vec![0.25, -0.5];
        let e = [0.3, -1.1, 2.0];
        let got = head.classify(&e).unwrap();
        for (k, g) in got.iter().enumerate() {
            let w = head.linear.weight.row(k);
            let expected = w[0] * e[0] + w[1] * e[1] + w[2] * e[2] + head.linear.bias[k];
            assert!((g - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let confident = Matrix::from_rows(&[[1e6, 0.0, 0.0], [0.0, 0.0, 1e6]]).unwrap();
        assert!(cross_entropy_loss(&confident, &[0, 2]).unwrap().abs() < 1e-6);

        let zeros = Matrix::zeros(3, 4);
        let v = cross_entropy_loss(&zeros, &[0, 3, 1]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-9);
        assert_eq!(v, 4f64.ln());

        let logits = Matrix::from_rows(&[
            [0.1, -1.2, 2.3, 0.4],
            [1.5, 0.0, -0.5, 0.25],
            [-2.0, 0.7, 0.3, 1.1],
        ])
        .unwrap();
        let v = cross_entropy_loss(&logits, &[2, 0, 3]).unwrap();
        assert!((v - 0.5083621940549357).abs() < 1e-9);

        assert!(matches!(
            cross_entropy_loss(&logits, &[2, 0, 4]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cross_entropy_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Matrix::from_fn(6, 4, |_, _| rng.random_range(-3.0..3.0));
        let labels = [0, 3, 1, 1, 2, 0];
        let perm = [4, 1, 5, 0, 3, 2];
        let permuted = logits.select_rows(&perm);
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = cross_entropy_loss(&logits, &labels).unwrap();
        let b = cross_entropy_loss(&permuted, &plabels).unwrap();
        assert!(a >= 0.0);
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = EncoderModel::glorot(Modality::Audio, 3, 4, 3, &mut rng);
            for p in model.parameters_mut() {
                p.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
            }
            let x = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.5..1.5));
            let labels = [0, 2, 1, 2];

            let (emb, cache) = model.encoder.forward_cached(&x).unwrap();
            let logits = model.head.forward(&emb).unwrap();
            let (_, d_logits) = cross_entropy_with_grad(&logits, &labels).unwrap();
            let (d_emb, g_head) = model.head.backward(&emb, &d_logits);
            let g_enc = model.encoder.backward(&cache, &d_emb);
            let analytic = EncoderModel {
                encoder: g_enc,
                head: g_head,
            }
            .flatten();

            let numeric = central_difference(
                |flat| {
                    let mut m = model.clone();
                    m.load_flat(flat);
                    let (_, logits) = m.forward(&x).unwrap();
                    cross_entropy_loss(&logits, &labels).unwrap()
                },
                &model.flatten(),
                1e-6,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "seed {seed}: {err}");

            // classify alone, against a random cotangent
            let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let em = Matrix::new(1, 4, e.clone()).unwrap();
            let wm = Matrix::new(1, 3, w.clone()).unwrap();
            let (d_e, _) = model.head.backward(&em, &wm);
            let numeric =
                central_difference(|v| dot(&model.head.classify(v).unwrap(), &w), &e, 1e-6);
            assert!(max_relative_error(d_e.as_slice(), &numeric) <= 1e-4);
        }
    }
}
