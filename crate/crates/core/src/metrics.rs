//! Segmentation and policy quality metrics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::env::RolloutResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    /// Half-width of the 95% interval, when one applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    pub support: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of predicted boundaries, matching each
/// prediction to at most one ground-truth boundary within `±tol`. Closest
/// pairs are matched first (ties: earlier prediction, then earlier truth).
/// Two empty sets score 1.
pub fn boundary_f1(predicted: &[usize], truth: &[usize], tol: usize) -> BoundaryScore {
    if predicted.is_empty() && truth.is_empty() {
        return BoundaryScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let mut pairs: Vec<(usize, usize, usize)> = predicted
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| {
            truth
                .iter()
                .enumerate()
                .map(move |(j, &g)| (p.abs_diff(g), i, j))
        })
        .filter(|&(d, _, _)| d <= tol)
        .collect();
    pairs.sort_unstable();
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matched = 0usize;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            matched += 1;
        }
    }
    let ratio = |n: usize| if n == 0 { 0.0 } else { matched as f64 / n as f64 };
    let precision = ratio(predicted.len());
    let recall = ratio(truth.len());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    BoundaryScore {
        precision,
        recall,
        f1,
    }
}

/// Indices `t > 0` where the label differs from the one before.
pub fn label_boundaries<T: PartialEq>(labels: &[T]) -> Vec<usize> {
    (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).collect()
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    let mut counts: Vec<usize> = counts.filter(|&c| c > 0).collect();
    counts.sort_unstable();
    counts
        .into_iter()
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(a; b) / ((H(a) + H(b)) / 2)`. A labeling
/// with a single cluster scores 0 against anything.
pub fn nmi<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} labels", a.len()), format!("{} labels", b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("nmi needs at least one label"));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<&A, usize> = HashMap::new();
    let mut cb: HashMap<&B, usize> = HashMap::new();
    let mut joint: HashMap<(&A, &B), usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ca.len() == 1 || cb.len() == 1 {
        return Ok(0.0);
    }
    // Fixed summation order, independent of hash iteration.
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[x] as f64 / n;
            let py = cb[y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Mean success with a 95% normal-approximation interval.
pub fn success_rate(name: &str, results: &[RolloutResult]) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::EmptyInput("success_rate needs at least one rollout"));
    }
    let n = results.len() as f64;
    let p = results.iter().filter(|r| r.success).count() as f64 / n;
    Ok(MetricReport {
        name: name.to_owned(),
        value: p,
        half_width: Some(1.96 * (p * (1.0 - p) / n).sqrt()),
        support: results.len(),
        per_seed: Vec::new(),
    })
}
