//! Ranking and classification metrics.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RankedScores {
    pub scores: Vec<f64>,
    pub relevance: Vec<bool>,
}

impl RankedScores {
    pub fn new(scores: Vec<f64>, relevance: Vec<bool>) -> Result<Self> {
        if scores.len() != relevance.len() {
            return Err(Error::shape(format!(
                "{} scores for {} relevance flags",
                scores.len(),
                relevance.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("NaN score"));
        }
        Ok(Self { scores, relevance })
    }

    /// Indices by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }
}

/// Non-interpolated AP: mean of precision@rank over the ranks of positives.
pub fn average_precision(rs: &RankedScores) -> Result<f64> {
    let positives = rs.relevance.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    // Precisions are summed in double-double so the mean is correctly rounded.
    let mut hits = 0usize;
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (rank, &i) in rs.ranking().iter().enumerate() {
        if rs.relevance[i] {
            hits += 1;
            let (h, r) = (hits as f64, (rank + 1) as f64);
            let q = h / r;
            let q_err = (-q).mul_add(r, h) / r;
            let (s, e) = two_sum(hi, q);
            (hi, lo) = fast_two_sum(s, e + lo + q_err);
        }
    }
    let p = positives as f64;
    let d = hi / p;
    Ok(d + ((-d).mul_add(p, hi) + lo) / p)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::invalid("mAP over zero classes"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}
