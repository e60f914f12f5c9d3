//! Missing-label evaluation against human labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{infer_flow, stage, ModelBundle, PipelineError, Stage};
use crate::landmark::LandmarkRecord;
use crate::ranking::ProductRecord;

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub product_id: String,
    pub true_missing: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub product: ProductRecord,
    pub records: Vec<LandmarkRecord>,
    pub true_missing: BTreeSet<usize>,
}

/// Metrics for one imageset; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    /// `|detected| / |true|`; exceeds 1 on over-detection.
    pub accuracy: Option<f64>,
    /// `|detected ∩ true| / |detected|`.
    pub precision: Option<f64>,
    /// `|detected ∩ true| / |true|`.
    pub recall: Option<f64>,
}

pub fn score_imageset(detected: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> SetScore {
    let hit = detected.intersection(truth).count() as f64;
    let ratio = |num: f64, den: usize| (den > 0).then(|| num / den as f64);
    SetScore {
        accuracy: ratio(detected.len() as f64, truth.len()),
        precision: ratio(hit, detected.len()),
        recall: ratio(hit, truth.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesetScore {
    pub product_id: String,
    pub detected_missing: Vec<usize>,
    pub true_missing: Vec<usize>,
    #[serde(flatten)]
    pub score: SetScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub imagesets: Vec<ImagesetScore>,
    /// Unweighted means over imagesets where the metric is defined.
    pub mean_accuracy: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    /// Imagesets left out of the accuracy mean for having no true labels.
    pub excluded: usize,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(bundle: &ModelBundle, sets: &[LabeledSet]) -> Result<EvalReport, PipelineError> {
    let k = bundle.k();
    let mut imagesets = Vec::with_capacity(sets.len());
    for set in sets {
        if let Some(&bad) = set.true_missing.iter().find(|&&c| c >= k) {
            return Err(stage(Stage::Inference)(format!(
                "label for {} names centroid {bad}, but the model has k = {k}",
                set.product.product_id
            )));
        }
        let report = infer_flow(bundle, &set.records, &set.product)?;
        let detected: BTreeSet<usize> = report.missing_indices().into_iter().collect();
        if set.true_missing.is_empty() {
            log::warn!("{}: no true missing labels, accuracy undefined", set.product.product_id);
        }
        imagesets.push(ImagesetScore {
            product_id: set.product.product_id.clone(),
            score: score_imageset(&detected, &set.true_missing),
            detected_missing: detected.into_iter().collect(),
            true_missing: set.true_missing.iter().copied().collect(),
        });
    }
    Ok(EvalReport {
        mean_accuracy: mean(imagesets.iter().map(|s| s.score.accuracy)),
        mean_precision: mean(imagesets.iter().map(|s| s.score.precision)),
        mean_recall: mean(imagesets.iter().map(|s| s.score.recall)),
        excluded: imagesets.iter().filter(|s| s.score.accuracy.is_none()).count(),
        imagesets,
    })
}
