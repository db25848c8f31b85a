//! Regression and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, UolError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub pc: f64,
    pub pairwise_acc: f64,
}

fn check_inputs(pred: &[f64], truth: &[f64]) -> Result<()> {
    check_dim(truth.len(), pred.len())?;
    if pred.iter().chain(truth).any(|x| !x.is_finite()) {
        return Err(UolError::InvalidArgument("metric inputs must be finite".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_inputs(pred, truth)?;
    if pred.is_empty() {
        return Err(UolError::UndefinedMetric("MAE of an empty set".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_inputs(pred, truth)?;
    if pred.is_empty() {
        return Err(UolError::UndefinedMetric("RMSE of an empty set".into()));
    }
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Pearson correlation; an error when either side has zero variance.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_inputs(pred, truth)?;
    if pred.len() < 2 {
        return Err(UolError::UndefinedMetric("correlation needs at least 2 instances".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(UolError::UndefinedMetric("correlation with a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_inputs(pred, truth)?;
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// Fraction of pairs with distinct ground truth whose predicted order agrees
/// (a predicted tie counts as a miss).
pub fn pairwise_accuracy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_inputs(pred, truth)?;
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let t = truth[i].total_cmp(&truth[j]);
            if t.is_eq() {
                continue;
            }
            total += 1;
            if pred[i].partial_cmp(&pred[j]) == Some(t) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Err(UolError::UndefinedMetric("no pairs with distinct ground truth".into()));
    }
    Ok(agree as f64 / total as f64)
}

pub fn report(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mae: mae(pred, truth)?,
        rmse: rmse(pred, truth)?,
        pc: pearson(pred, truth)?,
        pairwise_acc: pairwise_accuracy(pred, truth)?,
    })
}
