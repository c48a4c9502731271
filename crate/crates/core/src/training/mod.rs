//! Three-phase optimization: a teacher encoder trained with cross entropy,
//! two students trained against the frozen teacher, and a fusion head over
//! the frozen encoders. Every phase keeps the epoch with the best dev
//! weighted F1 (epoch 0 is the initialization).

pub mod gradcheck;
mod optimizer;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, DatasetSplit, FeatureRecord, GeneratorConfig, Split};
use crate::distillation::{student_objective, DistillBatch, KdConfig};
use crate::encoders::{cross_entropy_loss, cross_entropy_with_grad, ClassifierHead, EncoderModel};
use crate::error::{Error, Result};
use crate::evaluation::weighted_f1;
use crate::fusion::{argmax, fusion_batch_loss, ConcatHead, Dropout, FusionConfig, FusionParams};
use crate::numerics::{Linear, Matrix, Parameters};
use crate::seeding::{derive_seed, rng_for};
use crate::Modality;

pub use gradcheck::{gradient_check, LossId};
pub use optimizer::{AdamW, LinearWarmup, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub fusion_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            teacher_epochs: 20,
            student_epochs: 20,
            fusion_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 32 }
    }
}

/// Everything a full run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    pub teacher: Modality,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kd: KdConfig,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            teacher: Modality::Text,
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kd: KdConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.kd.validate()?;
        if self.model.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        self.fusion.validate(self.model.embed_dim)
    }

    /// Uses `seed` for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn students(&self) -> [Modality; 2] {
        self.teacher.others()
    }
}

/// One row of the per-epoch metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub split: Split,
    pub loss: f64,
    pub weighted_f1: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,split,loss,weighted_f1";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.12},{:.12}",
            r.epoch,
            r.phase,
            r.split.name(),
            r.loss,
            r.weighted_f1
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedEncoder {
    pub model: EncoderModel,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub history: Vec<EpochMetrics>,
}

pub fn feature_matrix(records: &[FeatureRecord], modality: Modality) -> Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features(modality)).collect();
    if rows.is_empty() {
        return Err(Error::Config("split has no records".into()));
    }
    Matrix::from_rows(&rows)
}

pub fn labels(records: &[FeatureRecord]) -> Vec<usize> {
    records.iter().map(|r| r.label).collect()
}

pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n / batch + usize::from(n % batch >= 2)
}

fn check_splits(data: &DatasetSplit) -> Result<()> {
    if data.train.len() < 2 {
        return Err(Error::Config(format!(
            "training split needs at least two records, found {}",
            data.train.len()
        )));
    }
    if data.dev.is_empty() {
        return Err(Error::Config(
            "dev split is empty; model selection needs it".into(),
        ));
    }
    Ok(())
}

/// Frozen-teacher outputs on the training split, aligned with its records.
struct TeacherTargets<'a> {
    logits: &'a Matrix,
    reprs: &'a Matrix,
    kd: &'a KdConfig,
}

fn score(logits: &Matrix, y: &[usize], classes: usize) -> Result<(f64, f64)> {
    Ok((
        cross_entropy_loss(logits, y)?,
        weighted_f1(&predictions(logits), y, classes)?,
    ))
}

fn fit_encoder(
    data: &DatasetSplit,
    modality: Modality,
    cfg: &PipelineConfig,
    phase: &str,
    epochs: usize,
    targets: Option<TeacherTargets<'_>>,
) -> Result<TrainedEncoder> {
    check_splits(data)?;
    let classes = data.num_classes;
    let train_x = feature_matrix(&data.train, modality)?;
    let train_y = labels(&data.train);
    let dev_x = feature_matrix(&data.dev, modality)?;
    let dev_y = labels(&data.dev);

    let mut init = rng_for(cfg.seed, &format!("encoder/{modality}/init"));
    let mut model = EncoderModel::glorot(
        modality,
        data.dims.get(modality),
        cfg.model.embed_dim,
        classes,
        &mut init,
    );
    let optimizer = cfg.train.optimizer();
    let mut state = OptimizerState::for_params(&model);
    let n = train_x.rows();
    let schedule = LinearWarmup::new(
        cfg.train.learning_rate,
        cfg.train.warmup_fraction,
        (epochs * steps_per_epoch(n, cfg.train.batch_size)) as u64,
    );

    let mut history = Vec::new();
    let mut evaluate = |epoch: usize, model: &EncoderModel| -> Result<f64> {
        let (loss, f1) = score(&model.forward(&train_x)?.1, &train_y, classes)?;
        history.push(EpochMetrics {
            epoch,
            phase: phase.to_string(),
            split: Split::Train,
            loss,
            weighted_f1: f1,
        });
        let (loss, f1) = score(&model.forward(&dev_x)?.1, &dev_y, classes)?;
        history.push(EpochMetrics {
            epoch,
            phase: phase.to_string(),
            split: Split::Dev,
            loss,
            weighted_f1: f1,
        });
        Ok(f1)
    };

    let mut best = (model.clone(), 0, evaluate(0, &model)?);
    for epoch in 1..=epochs {
        let seed = derive_seed(cfg.seed, &format!("encoder/{modality}/shuffle/{epoch}"));
        for batch in make_batches(n, cfg.train.batch_size, seed)? {
            let x = train_x.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (emb, cache) = model.encoder.forward_cached(&x)?;
            let logits = model.head.forward(&emb)?;
            let (d_logits, d_reprs) = match &targets {
                None => (cross_entropy_with_grad(&logits, &y)?.1, None),
                Some(t) => {
                    let teacher_logits = t.logits.select_rows(&batch);
                    let teacher_reprs = t.reprs.select_rows(&batch);
                    let objective = student_objective(
                        &DistillBatch {
                            student_logits: &logits,
                            teacher_logits: &teacher_logits,
                            student_reprs: &emb,
                            teacher_reprs: &teacher_reprs,
                            labels: &y,
                        },
                        t.kd,
                    )?;
                    (objective.grad_logits, Some(objective.grad_reprs))
                }
            };
            let (mut d_emb, head_grad) = model.head.backward(&emb, &d_logits);
            if let Some(d) = d_reprs {
                d_emb.add_assign(&d);
            }
            let grads = EncoderModel {
                encoder: model.encoder.backward(&cache, &d_emb),
                head: head_grad,
            };
            let lr = schedule.lr(state.step);
            optimizer.step(&mut model, &grads, &mut state, lr)?;
        }
        let f1 = evaluate(epoch, &model)?;
        if f1 > best.2 {
            best = (model.clone(), epoch, f1);
        }
    }
    Ok(TrainedEncoder {
        model: best.0,
        best_epoch: best.1,
        best_dev_f1: best.2,
        history,
    })
}

/// Cross-entropy training of the teacher encoder and head.
pub fn train_teacher(data: &DatasetSplit, cfg: &PipelineConfig) -> Result<TrainedEncoder> {
    cfg.validate()?;
    fit_encoder(
        data,
        cfg.teacher,
        cfg,
        "teacher",
        cfg.train.teacher_epochs,
        None,
    )
}

/// Trains both students against the frozen teacher. With `alpha = beta = 0`
/// this is plain cross-entropy training.
pub fn distill_students(
    data: &DatasetSplit,
    teacher: &EncoderModel,
    cfg: &PipelineConfig,
) -> Result<Vec<TrainedEncoder>> {
    cfg.validate()?;
    if teacher.modality() != cfg.teacher {
        return Err(Error::Config(format!(
            "teacher checkpoint is a {} encoder but the config names {}",
            teacher.modality(),
            cfg.teacher
        )));
    }
    check_splits(data)?;
    let (reprs, logits) = teacher.forward(&feature_matrix(&data.train, cfg.teacher)?)?;
    let use_kd = cfg.kd.alpha != 0.0 || cfg.kd.beta != 0.0;
    cfg.students()
        .into_iter()
        .map(|m| {
            let targets = use_kd.then_some(TeacherTargets {
                logits: &logits,
                reprs: &reprs,
                kd: &cfg.kd,
            });
            fit_encoder(
                data,
                m,
                cfg,
                &format!("student_{m}"),
                cfg.train.student_epochs,
                targets,
            )
        })
        .collect()
}

/// The trainable part of the fused model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
// One head per model, so the size gap between variants costs nothing.
#[allow(clippy::large_enum_variant)]
pub enum FusionHead {
    /// Attention over the students, gated shift of the teacher embedding.
    Shift(FusionParams),
    /// Linear classifier over `[F_T; F_1; ...]`.
    Concat(ConcatHead),
}

impl Parameters for FusionHead {
    fn parameters(&self) -> Vec<&[f64]> {
        match self {
            FusionHead::Shift(p) => p.parameters(),
            FusionHead::Concat(h) => h.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            FusionHead::Shift(p) => p.parameters_mut(),
            FusionHead::Concat(h) => h.parameters_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub teacher: Modality,
    /// Student modalities in token order.
    pub nonverbal: Vec<Modality>,
    pub head: FusionHead,
}

/// Frozen-encoder embeddings for one split.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub teacher: Matrix,
    pub nonverbal: Vec<Matrix>,
}

impl FusionInputs {
    pub fn embed(
        records: &[FeatureRecord],
        teacher: &EncoderModel,
        students: &[&EncoderModel],
    ) -> Result<Self> {
        Ok(Self {
            teacher: teacher
                .encoder
                .encode_batch(&feature_matrix(records, teacher.modality())?)?,
            nonverbal: students
                .iter()
                .map(|s| {
                    s.encoder
                        .encode_batch(&feature_matrix(records, s.modality())?)
                })
                .collect::<Result<_>>()?,
        })
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            teacher: self.teacher.select_rows(rows),
            nonverbal: self.nonverbal.iter().map(|m| m.select_rows(rows)).collect(),
        }
    }

    fn concatenated(&self) -> Matrix {
        let parts: Vec<&Matrix> = std::iter::once(&self.teacher)
            .chain(&self.nonverbal)
            .collect();
        let cols: usize = parts.iter().map(|m| m.cols()).sum();
        let mut out = Matrix::zeros(self.teacher.rows(), cols);
        for i in 0..self.teacher.rows() {
            let row: Vec<f64> = parts
                .iter()
                .flat_map(|m| m.row(i).iter().copied())
                .collect();
            out.row_mut(i).copy_from_slice(&row);
        }
        out
    }
}

impl FusionModel {
    /// Evaluation-mode logits and, for the shift head, each row's λ.
    pub fn predict(&self, inputs: &FusionInputs) -> Result<(Matrix, Vec<f64>)> {
        match &self.head {
            FusionHead::Shift(params) => {
                let n = inputs.teacher.rows();
                let mut logits = Matrix::zeros(n, params.classifier.num_classes());
                let mut lambdas = Vec::with_capacity(n);
                for i in 0..n {
                    let nv: Vec<&[f64]> = inputs.nonverbal.iter().map(|m| m.row(i)).collect();
                    let (l, trace) =
                        params.fuse_and_classify(inputs.teacher.row(i), &nv, Dropout::Disabled)?;
                    logits.row_mut(i).copy_from_slice(&l);
                    lambdas.push(trace.lambda);
                }
                Ok((logits, lambdas))
            }
            FusionHead::Concat(head) => {
                Ok((head.classifier.forward(&inputs.concatenated())?, Vec::new()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedFusion {
    pub model: FusionModel,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub history: Vec<EpochMetrics>,
}

/// Both fusion heads start from the teacher's classifier, so before any
/// update the fused prediction is (for the concat head exactly, for the shift
/// head up to the bounded shift) the teacher-only prediction.
fn initial_head(teacher: &EncoderModel, k: usize, cfg: &PipelineConfig) -> Result<FusionHead> {
    let d = cfg.model.embed_dim;
    let mut rng = rng_for(cfg.seed, "fusion/init");
    if cfg.fusion.asf {
        return Ok(FusionHead::Shift(FusionParams::glorot(
            d,
            k,
            teacher.head.clone(),
            &cfg.fusion,
            &mut rng,
        )?));
    }
    let t = &teacher.head.linear;
    let classes = t.output_dim();
    let weight = Matrix::from_fn(classes, d * (k + 1), |i, j| {
        if j < d {
            t.weight.get(i, j)
        } else {
            0.0
        }
    });
    Ok(FusionHead::Concat(ConcatHead {
        classifier: ClassifierHead {
            linear: Linear::new(weight, t.bias.clone())?,
        },
    }))
}

/// Trains the fusion head over frozen encoders. `students` lists the
/// non-verbal encoders in token order (one or two).
pub fn train_fusion(
    data: &DatasetSplit,
    teacher: &EncoderModel,
    students: &[&EncoderModel],
    cfg: &PipelineConfig,
) -> Result<TrainedFusion> {
    cfg.validate()?;
    check_splits(data)?;
    if students.is_empty() || students.len() > 2 {
        return Err(Error::Config(format!(
            "fusion takes one or two students, got {}",
            students.len()
        )));
    }
    let nonverbal: Vec<Modality> = students.iter().map(|s| s.modality()).collect();
    if nonverbal.contains(&teacher.modality())
        || (nonverbal.len() == 2 && nonverbal[0] == nonverbal[1])
    {
        return Err(Error::Config(
            "fusion inputs must be distinct modalities".into(),
        ));
    }
    let classes = data.num_classes;
    let train = FusionInputs::embed(&data.train, teacher, students)?;
    let dev = FusionInputs::embed(&data.dev, teacher, students)?;
    let train_y = labels(&data.train);
    let dev_y = labels(&data.dev);

    let mut model = FusionModel {
        teacher: teacher.modality(),
        nonverbal,
        head: initial_head(teacher, students.len(), cfg)?,
    };
    let optimizer = cfg.train.optimizer();
    let mut state = OptimizerState::for_params(&model.head);
    let n = train_y.len();
    let epochs = cfg.train.fusion_epochs;
    let schedule = LinearWarmup::new(
        cfg.train.learning_rate,
        cfg.train.warmup_fraction,
        (epochs * steps_per_epoch(n, cfg.train.batch_size)) as u64,
    );
    let mut dropout_rng = rng_for(cfg.seed, "fusion/dropout");

    let mut history = Vec::new();
    let mut evaluate = |epoch: usize, model: &FusionModel| -> Result<f64> {
        for (split, inputs, y) in [(Split::Train, &train, &train_y), (Split::Dev, &dev, &dev_y)] {
            let (loss, f1) = score(&model.predict(inputs)?.0, y, classes)?;
            history.push(EpochMetrics {
                epoch,
                phase: "fusion".into(),
                split,
                loss,
                weighted_f1: f1,
            });
        }
        Ok(history.last().expect("just pushed").weighted_f1)
    };

    let mut best = (model.clone(), 0, evaluate(0, &model)?);
    for epoch in 1..=epochs {
        let seed = derive_seed(cfg.seed, &format!("fusion/shuffle/{epoch}"));
        for batch in make_batches(n, cfg.train.batch_size, seed)? {
            let inputs = train.select(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let grads = match &model.head {
                FusionHead::Shift(params) => {
                    let nv: Vec<&Matrix> = inputs.nonverbal.iter().collect();
                    FusionHead::Shift(
                        fusion_batch_loss(
                            params,
                            &inputs.teacher,
                            &nv,
                            &y,
                            Some(&mut dropout_rng),
                        )?
                        .1,
                    )
                }
                FusionHead::Concat(head) => {
                    let x = inputs.concatenated();
                    let (_, d_logits) = cross_entropy_with_grad(&head.classifier.forward(&x)?, &y)?;
                    FusionHead::Concat(ConcatHead {
                        classifier: head.classifier.backward(&x, &d_logits).1,
                    })
                }
            };
            let lr = schedule.lr(state.step);
            optimizer.step(&mut model.head, &grads, &mut state, lr)?;
        }
        let f1 = evaluate(epoch, &model)?;
        if f1 > best.2 {
            best = (model.clone(), epoch, f1);
        }
    }
    Ok(TrainedFusion {
        model: best.0,
        best_epoch: best.1,
        best_dev_f1: best.2,
        history,
    })
}

/// Outputs of all three phases.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub teacher: TrainedEncoder,
    pub students: Vec<TrainedEncoder>,
    pub fusion: TrainedFusion,
}

impl PipelineRun {
    pub fn history(&self) -> Vec<EpochMetrics> {
        let mut rows = self.teacher.history.clone();
        for s in &self.students {
            rows.extend(s.history.iter().cloned());
        }
        rows.extend(self.fusion.history.iter().cloned());
        rows
    }
}

pub fn run_pipeline(data: &DatasetSplit, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let teacher = train_teacher(data, cfg)?;
    let students = distill_students(data, &teacher.model, cfg)?;
    let refs: Vec<&EncoderModel> = students.iter().map(|s| &s.model).collect();
    let fusion = train_fusion(data, &teacher.model, &refs, cfg)?;
    Ok(PipelineRun {
        teacher,
        students,
        fusion,
    })
}
