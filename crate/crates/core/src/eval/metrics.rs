use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// A sample is predicted positive iff its score is strictly above
    /// `threshold`.
    pub fn from_scores(labels: &[bool], scores: &[f64], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&y, &s) in labels.iter().zip(scores) {
            match (y, s > threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

/// `num/den`, or 0 for an empty denominator.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve via midranks (the Mann–Whitney statistic):
/// the probability that a random positive outscores a random negative,
/// ties counting one half.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} labels, {} scores", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of doubled midranks of the positives keeps everything integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled midrank = i + j + 2
        let mid2 = (i + j + 2) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank2_pos += mid2 * pos;
        i = j + 1;
    }
    let np = n_pos as u64;
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// ROC operating points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per
/// distinct score threshold, highest threshold first.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y).count().max(1) as f64;
    let n_neg = labels.iter().filter(|&&y| !y).count().max(1) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (n, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1
        } else {
            fp += 1
        }
        let last_of_tie = order.get(n + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            pts.push((fp as f64 / n_neg, tp as f64 / n_pos));
        }
    }
    pts
}

/// Lesion-level metric suite. `auc` is `None` when the labels hold a single
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mcc: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["auc", "accuracy", "f1", "sensitivity", "specificity", "mcc"];

    /// Values in [`Metrics::NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.auc, Some(self.accuracy), Some(self.f1), Some(self.sensitivity), Some(self.specificity), Some(self.mcc)]
    }
}

pub fn compute_metrics(labels: &[bool], scores: &[f64], threshold: f64) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let auc = match roc_auc(labels, scores) {
        Ok(a) => Some(a),
        Err(Error::AucUndefined) => None,
        Err(e) => return Err(e),
    };
    let c = ConfusionCounts::from_scores(labels, scores, threshold);
    Ok(Metrics {
        auc,
        accuracy: c.accuracy(),
        f1: c.f1(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        mcc: c.mcc(),
    })
}
