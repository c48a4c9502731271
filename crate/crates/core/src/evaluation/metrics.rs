use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn check(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predictions
        .iter()
        .chain(labels)
        .find(|&&c| c >= num_classes)
    {
        return Err(Error::InvalidInput(format!(
            "class index {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Raw confusion counts and their row-normalized form. Rows for classes with
/// no true instances stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `counts[i][j]`: true class `i` predicted as `j`.
    pub counts: Vec<Vec<usize>>,
    pub normalized: Matrix,
}

pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Confusion> {
    check(predictions, labels, num_classes)?;
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[y][p] += 1;
    }
    let normalized = Matrix::from_fn(num_classes, num_classes, |i, j| {
        let total: usize = counts[i].iter().sum();
        if total == 0 {
            0.0
        } else {
            counts[i][j] as f64 / total as f64
        }
    });
    Ok(Confusion { counts, normalized })
}

/// Per-class F1 and true-label support. A class with no predictions and no
/// instances scores 0.
pub fn per_class_f1(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let confusion = confusion_matrix(predictions, labels, num_classes)?;
    let counts = &confusion.counts;
    let mut f1 = Vec::with_capacity(num_classes);
    let mut support = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = counts[c][c];
        let actual: usize = counts[c].iter().sum();
        let predicted: usize = counts.iter().map(|row| row[c]).sum();
        // F1 = 2tp / (|predicted| + |actual|)
        let denom = predicted + actual;
        f1.push(if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        });
        support.push(actual);
    }
    Ok((f1, support))
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let (f1, support) = per_class_f1(predictions, labels, num_classes)?;
    let total = labels.len() as f64;
    Ok(f1
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64 / total)
        .sum())
}

/// Scores for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub support: Vec<usize>,
    pub confusion: Confusion,
    /// Counts of λ in ten equal bins over `[0, 1]`; empty when the model has
    /// no shift stage.
    pub lambda_histogram: Vec<usize>,
}

pub const LAMBDA_BINS: usize = 10;

impl EvalReport {
    pub fn new(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        lambdas: &[f64],
    ) -> Result<Self> {
        let (per_class, support) = per_class_f1(predictions, labels, num_classes)?;
        let total = labels.len() as f64;
        let weighted = per_class
            .iter()
            .zip(&support)
            .map(|(f, &s)| f * s as f64 / total)
            .sum();
        Ok(Self {
            weighted_f1: weighted,
            per_class_f1: per_class,
            support,
            confusion: confusion_matrix(predictions, labels, num_classes)?,
            lambda_histogram: lambda_histogram(lambdas),
        })
    }

    /// Plain-text rendering: one `key value` pair per line.
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        out.push_str(&format!("weighted_f1 {:.6}\n", self.weighted_f1));
        out.push_str(&format!(
            "per_class_f1 {}\n",
            join(&mut self.per_class_f1.iter().map(|f| format!("{f:.6}")))
        ));
        out.push_str(&format!(
            "support {}\n",
            join(&mut self.support.iter().map(usize::to_string))
        ));
        for (i, row) in self.confusion.counts.iter().enumerate() {
            out.push_str(&format!(
                "confusion_counts[{i}] {}\n",
                join(&mut row.iter().map(usize::to_string))
            ));
        }
        if !self.lambda_histogram.is_empty() {
            out.push_str(&format!(
                "lambda_histogram {}\n",
                join(&mut self.lambda_histogram.iter().map(usize::to_string))
            ));
        }
        out
    }

    /// Row-normalized confusion matrix as CSV with a header row.
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.normalized.rows();
        let mut out = String::from("true");
        for j in 0..c {
            out.push_str(&format!(",pred_{j}"));
        }
        out.push('\n');
        for i in 0..c {
            out.push_str(&i.to_string());
            for v in self.confusion.normalized.row(i) {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn lambda_histogram(lambdas: &[f64]) -> Vec<usize> {
    if lambdas.is_empty() {
        return Vec::new();
    }
    let mut bins = vec![0; LAMBDA_BINS];
    for &l in lambdas {
        let i = ((l * LAMBDA_BINS as f64) as usize).min(LAMBDA_BINS - 1);
        bins[i] += 1;
    }
    bins
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        assert_eq!(weighted_f1(&y, &y, 3).unwrap(), 1.0);
        let c = confusion_matrix(&y, &y, 4).unwrap();
        assert_eq!(c.normalized.row(1), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(c.normalized.row(3), &[0.0; 4]);
    }

    #[test]
    fn majority_guess() {
        let f = weighted_f1(&[0, 0, 0], &[0, 0, 1], 2).unwrap();
        assert!((f - 0.8 * 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn single_class() {
        assert_eq!(weighted_f1(&[2, 2], &[2, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn swapped() {
        let c = confusion_matrix(&[1, 0], &[0, 1], 2).unwrap();
        assert_eq!(c.normalized.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            weighted_f1(&[], &[], 2),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            weighted_f1(&[0], &[0, 1], 2),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            weighted_f1(&[3], &[0], 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(
            lambda_histogram(&[0.0, 0.05, 0.1, 1.0]),
            vec![2, 1, 0, 0, 0, 0, 0, 0, 0, 1]
        );
        assert!(lambda_histogram(&[]).is_empty());
    }

    fn labelled() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..4, n),
                prop::collection::vec(0usize..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn relabeling_invariance((p, y) in labelled(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
            let f = weighted_f1(&p, &y, 4).unwrap();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let yy: Vec<usize> = y.iter().map(|&c| perm[c]).collect();
            prop_assert!((f - weighted_f1(&pp, &yy, 4).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn counts_sum_to_batch((p, y) in labelled()) {
            let c = confusion_matrix(&p, &y, 4).unwrap();
            prop_assert_eq!(c.counts.iter().flatten().sum::<usize>(), p.len());
            for i in 0..4 {
                let s: f64 = c.normalized.row(i).iter().sum();
                let supported = y.contains(&i);
                let expected = if supported { 1.0 } else { 0.0 };
                prop_assert!((s - expected).abs() < 1e-9, "row {} sums to {}", i, s);
            }
            let f = weighted_f1(&p, &y, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
