//! Multi-label evaluation: per-class average precision and ROC-AUC with
//! macro averages.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::layers::HgnnModel;

/// Non-interpolated average precision over a descending-score ranking.
///
/// Tied scores keep their original order. Returns `None` when there are no
/// positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / n_pos as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// midranks for ties. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based: positions start+1 ..= end
        let midrank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += midrank * positives as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn has_ties(scores: &[f64]) -> bool {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean AP over classes with at least one positive.
    pub map: Option<f64>,
    /// `None` for classes lacking either positives or negatives.
    pub per_class_auc: Vec<Option<f64>>,
    pub roc_auc: Option<f64>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Classes whose AP or AUC was undefined and left out of the means.
    pub excluded_classes: Vec<usize>,
    /// Classes whose score ranking contained ties.
    pub tied_classes: Vec<usize>,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Scores `n x C` against multi-hot labels `n x C`.
pub fn evaluate_scores(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> EvalResult {
    assert_eq!(scores.len(), labels.len());
    let classes = scores.first().map_or(0, Vec::len);
    let mut result = EvalResult {
        per_class_ap: Vec::with_capacity(classes),
        map: None,
        per_class_auc: Vec::with_capacity(classes),
        roc_auc: None,
        positives: Vec::with_capacity(classes),
        negatives: Vec::with_capacity(classes),
        excluded_classes: Vec::new(),
        tied_classes: Vec::new(),
    };
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let l: Vec<bool> = labels.iter().map(|row| row[c]).collect();
        let pos = l.iter().filter(|x| **x).count();
        let ap = average_precision(&s, &l);
        let auc = roc_auc(&s, &l);
        if ap.is_none() || auc.is_none() {
            warn!("class {c} has {pos} positives out of {}; excluded from macro means", l.len());
            result.excluded_classes.push(c);
        }
        if has_ties(&s) {
            result.tied_classes.push(c);
        }
        result.per_class_ap.push(ap);
        result.per_class_auc.push(auc);
        result.positives.push(pos);
        result.negatives.push(l.len() - pos);
    }
    result.map = mean_defined(&result.per_class_ap);
    result.roc_auc = mean_defined(&result.per_class_auc);
    result
}

/// Runs the model over every sample and scores the predictions.
pub fn evaluate(model: &HgnnModel<f32>, samples: &[Sample]) -> Result<EvalResult> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.graph)?;
        scores.push(pred.probs.iter().map(|&p| p as f64).collect());
        labels.push(s.labels.clone());
    }
    Ok(evaluate_scores(&scores, &labels))
}
