//! Ranking metrics: one-vs-rest average precision and the report emitted
//! by a training run.
//!
//! Average precision uses all-points interpolation. For one class, samples
//! are ranked by their score for that class (descending, ties broken by
//! sample index, so the ordering is stable and deterministic) and
//!
//! ```text
//! AP = sum_i (R_i - R_{i-1}) * P_i
//! ```
//!
//! over the positives in rank order, where `P_i` is the precision at the
//! rank of positive `i` and each recall step `R_i - R_{i-1}` is `1 / n_pos`.
//! Classes that never appear in the labels have no positives and no curve;
//! they are excluded from the mean and reported.

use crate::error::{Error, Result};

/// Per-class average precision plus the mean over classes with positives.
#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// `(class_id, ap)` for every class with at least one positive,
    /// ascending by class id.
    pub per_class: Vec<(usize, f64)>,
    /// Arithmetic mean of `per_class` APs.
    pub map: f64,
    /// Classes excluded from the mean for lack of positives.
    pub skipped_classes: Vec<usize>,
}

/// Everything a training run reports: the ranking quality on the test set
/// and the per-epoch traces.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub per_class_ap: Vec<(usize, f64)>,
    pub map: f64,
    pub skipped_classes: Vec<usize>,
    /// Mean train loss per epoch.
    pub train_loss: Vec<f64>,
    /// Learning rate used in each epoch.
    pub lr_trace: Vec<f64>,
    /// Wall-clock seconds per epoch.
    pub seconds: Vec<f64>,
}

/// Average precision of one class's ranking.
///
/// `order` must already be sorted by descending score with stable index
/// tie-breaks; `positive` marks the samples belonging to the class.
fn average_precision(order: &[usize], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut tp = 0usize;
    // Summing precisions first and dividing once keeps the result in
    // [0, 1] even under rounding (each precision is at most 1).
    let mut precision_sum = 0.0;
    for (rank0, &sample) in order.iter().enumerate() {
        if positive[sample] {
            tp += 1;
            precision_sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Some(precision_sum / n_pos as f64)
}

/// One-vs-rest mean average precision.
///
/// `scores` is row-major `(M, classes)`: sample `m`'s score for class `k`
/// sits at `scores[m * classes + k]`. `labels[m]` is sample `m`'s class.
pub fn mean_average_precision(
    scores: &[f64],
    classes: usize,
    labels: &[usize],
) -> Result<ApReport> {
    let m = labels.len();
    if m == 0 || classes == 0 {
        return Err(Error::Usage(
            "mean_average_precision needs at least one sample and one class".into(),
        ));
    }
    if scores.len() != m * classes {
        return Err(Error::Shape(format!(
            "scores has {} entries, expected {} samples x {} classes",
            scores.len(),
            m,
            classes
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Usage(format!(
            "label {bad} is out of range for {classes} classes"
        )));
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(m);
    let mut positive = vec![false; m];
    for k in 0..classes {
        for (flag, &label) in positive.iter_mut().zip(labels) {
            *flag = label == k;
        }
        order.clear();
        order.extend(0..m);
        // Stable sort keeps sample-index order among equal scores.
        order.sort_by(|&a, &b| {
            scores[b * classes + k].total_cmp(&scores[a * classes + k])
        });
        match average_precision(&order, &positive) {
            Some(ap) => per_class.push((k, ap)),
            None => skipped.push(k),
        }
    }
    if per_class.is_empty() {
        return Err(Error::Usage(
            "no class has a positive sample; AP is undefined everywhere".into(),
        ));
    }
    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(ApReport {
        per_class,
        map,
        skipped_classes: skipped,
    })
}
