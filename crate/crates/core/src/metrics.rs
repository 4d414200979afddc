//! AUC, relative AUC loss and multi-seed aggregation.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_auc_loss_pct: Option<f64>,
}

/// Area under the ROC curve via the Mann–Whitney rank statistic. Tied scores
/// get their average rank, so a tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // ranks are 1-based; a tie block spanning positions i..j gets (i+j+1)/2
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] != 0).count();
        pos_rank_sum += rank * pos_in_block as f64;
        i = j;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// `100 · ((1 − auc) − (1 − auc_np)) / (1 − auc_np)`.
pub fn relative_auc_loss(auc: f64, auc_np: f64) -> Result<f64> {
    if auc_np >= 1.0 {
        return Err(Error::Domain(format!(
            "relative AUC loss is undefined for a baseline AUC of {auc_np}"
        )));
    }
    Ok(100.0 * ((1.0 - auc) - (1.0 - auc_np)) / (1.0 - auc_np))
}

pub fn evaluate(scores: &[f64], labels: &[u8], auc_np: Option<f64>) -> Result<EvalResult> {
    let auc = auc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let relative_auc_loss_pct = auc_np.map(|b| relative_auc_loss(auc, b)).transpose()?;
    Ok(EvalResult {
        auc,
        n_pos,
        n_neg: labels.len() - n_pos,
        relative_auc_loss_pct,
    })
}

/// Mean and sample standard deviation of per-seed results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Arithmetic mean ± (n−1) standard deviation; the std is 0 for a single
/// value. Panics on an empty slice.
pub fn aggregate(values: &[f64]) -> Summary {
    assert!(!values.is_empty(), "aggregate of no results");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary { mean, std, n }
}
