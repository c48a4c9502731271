//! Metrics, evaluation reports and the ablation runner.

mod ablation;
mod metrics;

pub use ablation::{
    run_ablation, AblationGrid, Cell, CellResult, GridSpec, SeedOutcome, Toggle, TrendReport,
};
pub use metrics::{
    confusion_matrix, lambda_histogram, per_class_f1, weighted_f1, Confusion, EvalReport,
    LAMBDA_BINS,
};

use crate::dataset::FeatureRecord;
use crate::encoders::EncoderModel;
use crate::error::Result;
use crate::training::{feature_matrix, labels, predictions, FusionInputs, FusionModel};

pub fn evaluate_encoder(
    model: &EncoderModel,
    records: &[FeatureRecord],
    num_classes: usize,
) -> Result<EvalReport> {
    let (_, logits) = model.forward(&feature_matrix(records, model.modality())?)?;
    EvalReport::new(&predictions(&logits), &labels(records), num_classes, &[])
}

pub fn evaluate_fusion(
    model: &FusionModel,
    teacher: &EncoderModel,
    students: &[&EncoderModel],
    records: &[FeatureRecord],
    num_classes: usize,
) -> Result<EvalReport> {
    let inputs = FusionInputs::embed(records, teacher, students)?;
    let (logits, lambdas) = model.predict(&inputs)?;
    EvalReport::new(
        &predictions(&logits),
        &labels(records),
        num_classes,
        &lambdas,
    )
}
