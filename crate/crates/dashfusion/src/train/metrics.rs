//! Regression and discretized-classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub label_scale: f64,
    /// Interior bin edges overriding the equal-width Acc-3 binning.
    pub acc3_edges: Option<Vec<f64>>,
    /// Interior bin edges overriding the equal-width Acc-5 binning.
    pub acc5_edges: Option<Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label_scale: 3.0,
            acc3_edges: None,
            acc5_edges: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    /// Negative vs non-negative, all samples.
    pub acc2_nn: f64,
    /// Negative vs positive, zero-labeled samples excluded.
    pub acc2_np: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub acc7: f64,
    pub f1_nn: f64,
    pub f1_np: f64,
    pub mae: f64,
    /// Pearson correlation; `None` when degenerate (zero variance or < 2
    /// samples), never NaN.
    pub corr: Option<f64>,
    pub n: usize,
    /// Samples retained by the negative/positive task.
    pub n_np: usize,
}

fn bin_equal_width(x: f64, scale: f64, k: usize) -> usize {
    let t = ((x + scale) / (2.0 * scale) * k as f64).floor();
    (t.max(0.0) as usize).min(k - 1)
}

fn bin_by_edges(x: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|&&e| x > e).count()
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Support-weighted mean of per-class F1 scores.
fn weighted_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| **p == c && **t == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| **p == c && **t != c)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| **p != c && **t == c)
            .count() as f64;
        let support = tp + fn_;
        if support == 0.0 {
            continue;
        }
        let f1 = if 2.0 * tp + fp + fn_ == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        f1_sum += f1 * support;
    }
    f1_sum / truth.len() as f64
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn acc7_class(x: f64) -> usize {
    (x.round().clamp(-3.0, 3.0) + 3.0) as usize
}

/// Compute the full metric suite over prediction/label vectors.
pub fn evaluate(predictions: &[f64], labels: &[f64], cfg: &EvalConfig) -> Result<MetricsReport> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Config(format!(
            "evaluate: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let scale = cfg.label_scale;

    // negative vs non-negative over all samples
    let nn_class = |x: f64| usize::from(x >= 0.0);
    let nn_pred: Vec<usize> = predictions.iter().map(|&p| nn_class(p)).collect();
    let nn_true: Vec<usize> = labels.iter().map(|&y| nn_class(y)).collect();

    // negative vs positive, zeros dropped
    let retained: Vec<usize> = (0..n).filter(|&i| labels[i] != 0.0).collect();
    let np_pred: Vec<usize> = retained.iter().map(|&i| nn_class(predictions[i])).collect();
    let np_true: Vec<usize> = retained
        .iter()
        .map(|&i| usize::from(labels[i] > 0.0))
        .collect();

    let bin3 = |x: f64| match &cfg.acc3_edges {
        Some(edges) => bin_by_edges(x, edges),
        None => bin_equal_width(x, scale, 3),
    };
    let bin5 = |x: f64| match &cfg.acc5_edges {
        Some(edges) => bin_by_edges(x, edges),
        None => bin_equal_width(x, scale, 5),
    };
    let p3: Vec<usize> = predictions.iter().map(|&p| bin3(p)).collect();
    let t3: Vec<usize> = labels.iter().map(|&y| bin3(y)).collect();
    let p5: Vec<usize> = predictions.iter().map(|&p| bin5(p)).collect();
    let t5: Vec<usize> = labels.iter().map(|&y| bin5(y)).collect();
    let p7: Vec<usize> = predictions.iter().map(|&p| acc7_class(p)).collect();
    let t7: Vec<usize> = labels.iter().map(|&y| acc7_class(y)).collect();

    let mae = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / n as f64;

    Ok(MetricsReport {
        acc2_nn: accuracy(&nn_pred, &nn_true),
        acc2_np: accuracy(&np_pred, &np_true),
        acc3: accuracy(&p3, &t3),
        acc5: accuracy(&p5, &t5),
        acc7: accuracy(&p7, &t7),
        f1_nn: weighted_f1(&nn_pred, &nn_true, 2),
        f1_np: weighted_f1(&np_pred, &np_true, 2),
        mae,
        corr: pearson(predictions, labels),
        n,
        n_np: retained.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&[-1.0, 0.0, 1.0], &[-1.0, 0.0, 1.0], &EvalConfig::default()).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.corr, Some(1.0));
        assert_eq!(r.acc2_nn, 1.0);
        assert_eq!(r.acc2_np, 1.0);
        assert_eq!(r.n_np, 2);
        assert_eq!(r.acc7, 1.0);
    }

    #[test]
    fn hand_arithmetic_case() {
        let r = evaluate(&[0.4, -0.4], &[1.0, -1.0], &EvalConfig::default()).unwrap();
        assert_eq!(r.acc2_np, 1.0);
        assert!((r.mae - 0.6).abs() < 1e-15);
    }

    #[test]
    fn small_magnitude_same_sign_collapses_to_full_accuracy() {
        // all |x| < 0.5 and one sign: every Acc-7 class is 0 and every NN
        // class matches
        let preds = [0.1, 0.3, 0.45, 0.05];
        let labels = [0.2, 0.4, 0.1, 0.3];
        let r = evaluate(&preds, &labels, &EvalConfig::default()).unwrap();
        assert_eq!(r.acc7, 1.0);
        assert_eq!(r.acc2_nn, 1.0);
    }

    #[test]
    fn corr_undefined_on_constant_input() {
        let r = evaluate(&[1.0, 1.0, 1.0], &[0.5, -0.5, 0.0], &EvalConfig::default()).unwrap();
        assert_eq!(r.corr, None);
        let r2 = evaluate(&[2.0], &[1.0], &EvalConfig::default()).unwrap();
        assert_eq!(r2.corr, None);
    }

    #[test]
    fn equal_width_bins_cover_the_range() {
        assert_eq!(bin_equal_width(-3.0, 3.0, 5), 0);
        assert_eq!(bin_equal_width(2.999, 3.0, 5), 4);
        assert_eq!(bin_equal_width(3.0, 3.0, 5), 4);
        assert_eq!(bin_equal_width(-9.0, 3.0, 5), 0);
        assert_eq!(bin_equal_width(9.0, 3.0, 5), 4);
        assert_eq!(bin_equal_width(0.0, 3.0, 3), 1);
    }

    #[test]
    fn custom_edges_override_binning() {
        let cfg = EvalConfig {
            acc3_edges: Some(vec![-0.1, 0.1]),
            ..EvalConfig::default()
        };
        // with tight custom edges these two land in different bins
        let r = evaluate(&[0.15, -0.15], &[0.5, -0.5], &cfg).unwrap();
        assert_eq!(r.acc3, 1.0);
        // default equal-width bins put 0.15 and 0.5 both in the middle bin too
        let r2 = evaluate(&[0.15, -1.15], &[0.5, -0.5], &cfg).unwrap();
        assert_eq!(r2.acc3, 0.5);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(evaluate(&[1.0], &[1.0, 2.0], &EvalConfig::default()).is_err());
        assert!(evaluate(&[], &[], &EvalConfig::default()).is_err());
    }
}
