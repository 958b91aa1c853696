//! Evaluation metrics for classification and regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Mcc,
    Spearman,
    Pearson,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
            Metric::Spearman => "spearman",
            Metric::Pearson => "pearson",
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Metric::Accuracy | Metric::F1 | Metric::Mcc)
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("metric inputs differ in length: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Input("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// F1 of class 1 against everything else. Zero when there are no true positives.
pub fn f1(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        match (p == 1, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Matthews correlation in its multiclass form; reduces to the binary
/// `(TP·TN − FP·FN)/√((TP+FP)(TP+FN)(TN+FP)(TN+FN))`. Zero denominator gives 0.
pub fn mcc(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    let k = pred.iter().chain(target).copied().max().unwrap_or(0) + 1;
    let mut conf = vec![0f64; k * k];
    for (&p, &t) in pred.iter().zip(target) {
        conf[t * k + p] += 1.0;
    }
    let n = pred.len() as f64;
    let correct: f64 = (0..k).map(|i| conf[i * k + i]).sum();
    let true_count: Vec<f64> = (0..k).map(|i| (0..k).map(|j| conf[i * k + j]).sum()).collect();
    let pred_count: Vec<f64> = (0..k).map(|j| (0..k).map(|i| conf[i * k + j]).sum()).collect();
    let cov_tp = correct * n - true_count.iter().zip(&pred_count).map(|(a, b)| a * b).sum::<f64>();
    let cov_pp = n * n - pred_count.iter().map(|x| x * x).sum::<f64>();
    let cov_tt = n * n - true_count.iter().map(|x| x * x).sum::<f64>();
    let den = cov_pp * cov_tt;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(cov_tp / den.sqrt())
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// One-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Predictions in the shape a metric consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Classes(Vec<usize>),
    Reals(Vec<f64>),
}

pub fn evaluate(metric: Metric, pred: &Predictions, target: &crate::model::Targets) -> Result<f64> {
    use crate::model::Targets;
    match (metric, pred, target) {
        (Metric::Accuracy, Predictions::Classes(p), Targets::Classes(t)) => accuracy(p, t),
        (Metric::F1, Predictions::Classes(p), Targets::Classes(t)) => f1(p, t),
        (Metric::Mcc, Predictions::Classes(p), Targets::Classes(t)) => mcc(p, t),
        (Metric::Spearman, Predictions::Reals(p), Targets::Reals(t)) => spearman(p, t),
        (Metric::Pearson, Predictions::Reals(p), Targets::Reals(t)) => pearson(p, t),
        _ => Err(Error::Input(format!(
            "metric {} does not apply to these predictions",
            metric.name()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_binary() {
        let y = [0, 1, 1, 0, 1];
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(f1(&y, &y).unwrap(), 1.0);
        assert_eq!(mcc(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_has_zero_mcc() {
        let target = [0, 1, 0, 1];
        assert_eq!(mcc(&[1, 1, 1, 1], &target).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 1, 1], &target).unwrap(), 0.5);
    }

    #[test]
    fn mcc_hand_case() {
        // TP=2, TN=1, FP=1, FN=1
        let target = [1, 1, 0, 0, 1];
        let pred = [1, 1, 0, 1, 0];
        assert_abs_diff_eq!(mcc(&pred, &target).unwrap(), 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f1(&pred, &target).unwrap(), 4.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn spearman_reversed_and_ties() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[8.0, 6.0, 4.0, 0.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn pearson_degenerate_and_exact() {
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Input(_))));
        assert!(matches!(spearman(&[0.0], &[]), Err(Error::Input(_))));
    }
}
