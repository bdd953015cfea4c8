//! Classification metrics over hard predictions and binary scores.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub balanced_acc: f64,
    pub macro_f1: f64,
    /// Only for two-class problems with both classes present.
    pub roc_auc: Option<f64>,
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    assert_eq!(y_true.len(), y_pred.len());
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    hits as f64 / y_true.len() as f64
}

/// Mean per-class recall over classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> f64 {
    let mut support = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        if t == p {
            hits[t] += 1;
        }
    }
    let recalls: Vec<f64> = (0..num_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| hits[c] as f64 / support[c] as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Unweighted mean of per-class F1 over classes seen in truth or prediction.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let scores: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores
/// count one half. `None` when either class is absent.
pub fn roc_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    assert_eq!(positive.len(), scores.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie blocks
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn classification_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    positive_scores: Option<&[f64]>,
    num_classes: usize,
) -> Metrics {
    let roc_auc = match positive_scores {
        Some(s) if num_classes == 2 => {
            let positive: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
            roc_auc(&positive, s)
        }
        _ => None,
    };
    Metrics {
        acc: accuracy(y_true, y_pred),
        balanced_acc: balanced_accuracy(y_true, y_pred, num_classes),
        macro_f1: macro_f1(y_true, y_pred, num_classes),
        roc_auc,
    }
}
