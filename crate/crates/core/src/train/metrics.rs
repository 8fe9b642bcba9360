use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub precision: f64,
}

impl Metrics {
    fn from_array(a: [f64; 4]) -> Self {
        Self {
            auc: a[0],
            acc: a[1],
            f1: a[2],
            precision: a[3],
        }
    }

    fn to_array(self) -> [f64; 4] {
        [self.auc, self.acc, self.f1, self.precision]
    }
}

/// Rank-based AUC (Mann-Whitney U over `n_pos * n_neg`), ties get midranks.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC is undefined when only one class is present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sums of midranks are half-integers, exact in f64 for any realistic n
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// AUC for per-class scores: the class-1 score for two classes, the macro
/// one-vs-rest mean otherwise.
pub fn auc(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    check_inputs(scores, labels, classes)?;
    if classes == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let p: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&s, &p);
    }
    let mut total = 0.0;
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auc_binary(&s, &p)?;
    }
    Ok(total / classes as f64)
}

fn check_inputs(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if classes < 2 {
        return Err(Error::Metric(format!("need at least 2 classes, got {classes}")));
    }
    if let Some(r) = scores.iter().position(|r| r.len() != classes) {
        return Err(Error::Metric(format!("score row {r} does not have {classes} entries")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Metric(format!("label {l} out of range")));
    }
    Ok(())
}

/// AUC, accuracy, macro F1 and macro precision. A class with no predicted
/// (or no true) members contributes 0 to the affected macro average.
pub fn metrics(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Metrics> {
    let auc = auc(scores, labels, classes)?;
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut f1 = 0.0;
    let mut precision = 0.0;
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&l| l == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        precision += p;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    Ok(Metrics {
        auc,
        acc: correct as f64 / labels.len() as f64,
        f1: f1 / classes as f64,
        precision: precision / classes as f64,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Element-wise mean and sample std over folds.
pub fn summarize(folds: &[Metrics]) -> (Metrics, Metrics) {
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for k in 0..4 {
        let col: Vec<f64> = folds.iter().map(|m| m.to_array()[k]).collect();
        (mean[k], std[k]) = mean_std(&col);
    }
    (Metrics::from_array(mean), Metrics::from_array(std))
}
