//! Glue between the modules: per-variant sample preparation, fold
//! evaluation and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use thiserror::Error;

use crate::dataset::{self, DatasetError, FoldPlan, Sample};
use crate::metrics::{
    self, aggregate_fold, cross_fold, global_accuracy, image_metrics, FoldRow, ImageRow, Metric, MetricsError,
};
use crate::model::Variant;
use crate::saliency::{reduce_to_top_contour, ConfidenceParams};
use crate::trainer::{predict, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("sample {id}: {source}")]
    Metrics {
        id: String,
        #[source]
        source: MetricsError,
    },
    #[error("fold {fold}: {source}")]
    FoldMetrics {
        fold: usize,
        #[source]
        source: MetricsError,
    },
    #[error("checkpoint is for {found} fold {found_fold}, expected {expected} fold {expected_fold}")]
    CheckpointMismatch {
        found: Variant,
        found_fold: usize,
        expected: Variant,
        expected_fold: usize,
    },
    #[error("sample {0} is not in the dataset")]
    UnknownId(String),
    #[error("fold {fold} is outside the plan's {folds} folds")]
    FoldOutOfRange { fold: usize, folds: usize },
}

/// Resizes every sample to `side x side`.
pub fn resize_all(samples: &[Sample], side: usize) -> Result<Vec<Sample>, DatasetError> {
    samples.iter().map(|s| dataset::resize_sample(s, side)).collect()
}

/// Copies of `samples` carrying the saliency `variant` consumes: maps
/// reduced to their top contour for `UnetSaC`, unchanged otherwise.
pub fn prepare_for_variant(samples: &[Sample], variant: Variant, params: &ConfidenceParams) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if variant == Variant::UnetSaC {
                s.saliency = reduce_to_top_contour(s.saliency.view(), params).map;
            }
            s
        })
        .collect()
}

/// Test-fold results of one checkpoint.
#[derive(Debug, Clone)]
pub struct FoldEvaluation {
    pub rows: Vec<ImageRow>,
    pub fold: FoldRow,
    pub probabilities: Vec<Array2<f32>>,
}

/// Runs `checkpoint` on the test ids of its fold and scores the predictions.
pub fn evaluate_fold(
    checkpoint: &Checkpoint,
    plan: &FoldPlan,
    samples: &[Sample],
    batch_size: usize,
) -> Result<FoldEvaluation, PipelineError> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let fold = checkpoint.fold;
    if fold == 0 || fold > plan.num_folds() {
        return Err(PipelineError::FoldOutOfRange {
            fold,
            folds: plan.num_folds(),
        });
    }
    let test_ids = &plan.folds[fold - 1];
    let test: Vec<&Sample> = test_ids
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| PipelineError::UnknownId(id.clone())))
        .collect::<Result<_, _>>()?;
    evaluate_samples(checkpoint, &test, batch_size)
}

pub fn evaluate_samples(
    checkpoint: &Checkpoint,
    test: &[&Sample],
    batch_size: usize,
) -> Result<FoldEvaluation, PipelineError> {
    let net = checkpoint.network()?;
    let probabilities = predict(&net, test, batch_size)?;
    score_predictions(probabilities, test, checkpoint.fold, checkpoint.variant)
}

/// Per-image and fold-level metrics of probability maps for `test`.
pub fn score_predictions(
    probabilities: Vec<Array2<f32>>,
    test: &[&Sample],
    fold: usize,
    variant: Variant,
) -> Result<FoldEvaluation, PipelineError> {
    let mut rows = Vec::with_capacity(test.len());
    for (p, s) in probabilities.iter().zip(test) {
        let m = image_metrics(p.view(), s.mask.view()).map_err(|source| PipelineError::Metrics {
            id: s.id.clone(),
            source,
        })?;
        rows.push(ImageRow {
            id: s.id.clone(),
            fold,
            variant,
            metrics: m,
        });
    }
    let fold_err = |source| PipelineError::FoldMetrics { fold, source };
    let preds: Vec<Array2<u8>> = probabilities.iter().map(|p| metrics::binarize(p.view())).collect();
    let truths: Vec<Array2<u8>> = test.iter().map(|s| s.mask.clone()).collect();
    let acc = global_accuracy(&preds, &truths).map_err(fold_err)?;
    let auc = metrics::auc_roc(&probabilities, &truths).ok();
    let per_image: Vec<_> = rows.iter().map(|r| r.metrics).collect();
    let agg = aggregate_fold(&per_image, Some(acc), auc).map_err(fold_err)?;
    Ok(FoldEvaluation {
        rows,
        fold: FoldRow {
            fold,
            variant,
            metrics: agg.record,
        },
        probabilities,
    })
}

/// Markdown table of cross-fold mean (std) per variant and metric.
pub fn summary_table(fold_rows: &[FoldRow]) -> String {
    let mut by_variant: BTreeMap<Variant, Vec<metrics::MetricsRecord>> = BTreeMap::new();
    for r in fold_rows {
        by_variant.entry(r.variant).or_default().push(r.metrics);
    }
    let mut out = String::from("| Model |");
    for m in Metric::ALL {
        let _ = write!(out, " {} |", m.label());
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(Metric::ALL.len()));
    out.push('\n');
    for (variant, folds) in &by_variant {
        let _ = write!(out, "| {} |", variant.label());
        for m in Metric::ALL {
            match cross_fold(folds, m) {
                Some(ms) => {
                    let _ = write!(out, " {ms} |");
                }
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean over images of `metric`, skipping undefined entries.
pub fn mean_over_images(rows: &[ImageRow], metric: Metric) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.metrics.get(metric)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
