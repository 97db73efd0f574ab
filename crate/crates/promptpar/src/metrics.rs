//! The five standard PAR evaluation metrics.
//!
//! Label-based mean accuracy averages per-attribute TPR/TNR; the
//! instance-based metrics follow the example-based convention: per sample,
//! predicted and ground-truth attribute sets are compared, and an instance
//! with empty prediction and empty truth counts as fully correct.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over attributes of (TPR + TNR) / 2.
    pub ma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub samples: usize,
    pub per_attribute: Vec<ConfusionCounts>,
    /// Attributes whose TPR term was undefined (no positive ground truth)
    /// and entered the mean as 0.
    pub undefined_tpr: Vec<usize>,
    /// Attributes whose TNR term was undefined (no negative ground truth).
    pub undefined_tnr: Vec<usize>,
}

impl MetricReport {
    /// Flat `key value` text rendering, one line per entry.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mA {:.6}\n", self.ma));
        out.push_str(&format!("accuracy {:.6}\n", self.accuracy));
        out.push_str(&format!("precision {:.6}\n", self.precision));
        out.push_str(&format!("recall {:.6}\n", self.recall));
        out.push_str(&format!("f1 {:.6}\n", self.f1));
        out.push_str(&format!("threshold {:.6}\n", self.threshold));
        out.push_str(&format!("samples {}\n", self.samples));
        for (j, c) in self.per_attribute.iter().enumerate() {
            out.push_str(&format!(
                "attribute.{j}.tp {} attribute.{j}.fp {} attribute.{j}.tn {} attribute.{j}.fn {}\n",
                c.tp, c.fp, c.tn, c.fn_
            ));
        }
        out
    }
}

/// Binarize probabilities at `threshold` and compute the metric suite.
pub fn compute_metrics(
    probabilities: &Array2<f64>,
    labels: &Array2<f64>,
    threshold: f64,
) -> Result<MetricReport> {
    if probabilities.dim() != labels.dim() {
        return Err(Error::Contract(format!(
            "probabilities {:?} vs labels {:?}",
            probabilities.dim(),
            labels.dim()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    let (m, n) = probabilities.dim();
    if m == 0 || n == 0 {
        return Err(Error::Contract("empty prediction matrix".into()));
    }
    for &y in labels.iter() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Contract(format!("non-binary label value {y}")));
        }
    }

    let mut per_attribute = vec![ConfusionCounts::default(); n];
    let mut acc_sum = 0.0;
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    for i in 0..m {
        let mut inter = 0usize;
        let mut pred = 0usize;
        let mut truth = 0usize;
        for j in 0..n {
            let p = probabilities[(i, j)] >= threshold;
            let y = labels[(i, j)] == 1.0;
            match (p, y) {
                (true, true) => per_attribute[j].tp += 1,
                (true, false) => per_attribute[j].fp += 1,
                (false, true) => per_attribute[j].fn_ += 1,
                (false, false) => per_attribute[j].tn += 1,
            }
            inter += usize::from(p && y);
            pred += usize::from(p);
            truth += usize::from(y);
        }
        let union = pred + truth - inter;
        acc_sum += ratio_or_vacuous(inter, union, pred == 0 && truth == 0);
        prec_sum += ratio_or_vacuous(inter, pred, pred == 0 && truth == 0);
        rec_sum += ratio_or_vacuous(inter, truth, pred == 0 && truth == 0);
    }

    let mut undefined_tpr = Vec::new();
    let mut undefined_tnr = Vec::new();
    let mut ma_sum = 0.0;
    for (j, c) in per_attribute.iter().enumerate() {
        let tpr = if c.tp + c.fn_ > 0 {
            c.tp as f64 / (c.tp + c.fn_) as f64
        } else {
            undefined_tpr.push(j);
            0.0
        };
        let tnr = if c.tn + c.fp > 0 {
            c.tn as f64 / (c.tn + c.fp) as f64
        } else {
            undefined_tnr.push(j);
            0.0
        };
        ma_sum += 0.5 * (tpr + tnr);
    }

    let accuracy = acc_sum / m as f64;
    let precision = prec_sum / m as f64;
    let recall = rec_sum / m as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        ma: ma_sum / n as f64,
        accuracy,
        precision,
        recall,
        f1,
        threshold,
        samples: m,
        per_attribute,
        undefined_tpr,
        undefined_tnr,
    })
}

fn ratio_or_vacuous(num: usize, denom: usize, vacuous: bool) -> f64 {
    if denom == 0 {
        // Empty prediction and empty truth: vacuously correct instance.
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / denom as f64
    }
}
