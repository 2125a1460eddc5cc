//! Clustering quality: matched accuracy, NMI, ARI and size uniformity.
//!
//! All measures depend only on the partitions, never on the numeric values
//! of cluster ids.

use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts of samples per (predicted cluster, true class) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `counts[p][t]`, rows follow sorted predicted ids, columns sorted true ids.
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::EmptyInput);
        }
        let pred_ids = dense_ids(pred);
        let true_ids = dense_ids(truth);
        let mut counts = vec![vec![0usize; true_ids.len()]; pred_ids.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[pred_ids[p]][true_ids[t]] += 1;
        }
        Ok(Self {
            counts,
            total: pred.len(),
        })
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|c| self.counts.iter().map(|r| r[c]).sum()).collect()
    }
}

fn dense_ids(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    ids
}

/// Fraction of samples correctly labeled under the best one-to-one mapping
/// from clusters to classes. Unequal cluster and class counts are padded
/// with empty rows or columns.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let size = table.counts.len().max(table.counts[0].len());
    let weights = pathfinding::matrix::Matrix::from_fn(size, size, |(r, c)| {
        table
            .counts
            .get(r)
            .and_then(|row| row.get(c))
            .map_or(0i64, |&v| v as i64)
    });
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / table.total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalization {
    /// `(H(U) + H(V)) / 2`.
    #[default]
    Arithmetic,
    /// `sqrt(H(U) H(V))`.
    Geometric,
}

/// Normalised mutual information with natural logarithms.
///
/// Two single-cluster partitions are identical and score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Arithmetic)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let n = table.total as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let h_pred = entropy_of_counts(&rows, n);
    let h_true = entropy_of_counts(&cols, n);
    if h_pred == 0.0 && h_true == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (rows[r] as f64 * cols[c] as f64)).ln();
        }
    }
    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (h_pred + h_true),
        NmiNormalization::Geometric => (h_pred * h_true).sqrt(),
    };
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn entropy_of_counts(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
///
/// When the expected and maximal index coincide (both partitions trivial in
/// the same way) the partitions are identical and the score is 1.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::Shape("ARI needs at least two samples".into()));
    }
    let table = ContingencyTable::new(pred, truth)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = table.row_sums().into_iter().map(pairs).sum();
    let sum_cols: f64 = table.col_sums().into_iter().map(pairs).sum();
    let expected = sum_rows * sum_cols / pairs(table.total);
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < f64::EPSILON * max.max(1.0) {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Shannon entropy (natural log) of the cluster-size histogram; at most `ln k`.
pub fn uniformity(labels: &[usize], k: usize) -> f64 {
    debug_assert!(labels.iter().all(|&l| l < k.max(1)));
    if labels.is_empty() {
        return 0.0;
    }
    let mut sizes = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    let counts: Vec<usize> = sizes.into_values().collect();
    entropy_of_counts(&counts, labels.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub uniformity: f64,
}

/// All four measures for one labeling; `k` is the number of clusters the
/// model could use.
pub fn evaluate_labels(pred: &[usize], truth: &[usize], k: usize) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        acc: clustering_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
        uniformity: uniformity(pred, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let t = [0, 0, 1, 1, 2];
        assert_eq!(clustering_accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[7, 7, 3, 3, 5], &t).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 2]).unwrap(), 0.75);
        assert!(clustering_accuracy(&[], &[]).is_err());
        assert!(clustering_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn nmi_examples() {
        let t = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0; 6], &t).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        let g = nmi_with(&[0, 0, 1, 1, 1], &[0, 0, 1, 1, 0], NmiNormalization::Geometric).unwrap();
        let a = nmi(&[0, 0, 1, 1, 1], &[0, 0, 1, 1, 0]).unwrap();
        assert!(g > 0.0 && a > 0.0 && g >= a - 1e-12);
    }

    #[test]
    fn ari_examples() {
        let t = [0, 0, 1, 1, 2];
        assert!((ari(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ari(&[0, 0, 0], &[4, 4, 4]).unwrap(), 1.0);
        // pairs: index 1, rows 2, cols 3, expected 1, max 2.5
        let v = ari(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((v - 0.0).abs() < 1e-12, "{v}");
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn uniformity_examples() {
        let equal: Vec<usize> = (0..51 * 4).map(|i| i % 51).collect();
        assert!((uniformity(&equal, 51) - 3.93).abs() < 0.005);
        assert_eq!(uniformity(&[2; 10], 3), 0.0);
        assert!((uniformity(&[0, 1, 0, 1], 2) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
