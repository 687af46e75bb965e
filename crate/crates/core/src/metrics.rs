//! Rationale quality and prediction metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `2PR / (P + R)`, with `0/0 := 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn prf_from_counts(overlap: usize, predicted: usize, gold: usize) -> Prf {
    let precision = if predicted == 0 {
        0.0
    } else {
        overlap as f64 / predicted as f64
    };
    let recall = if gold == 0 {
        0.0
    } else {
        overlap as f64 / gold as f64
    };
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Token-level precision/recall/F1 of one predicted mask against gold.
///
/// Returns `Ok(None)` when gold is empty (such examples are excluded).
pub fn token_prf(predicted: &[u8], gold: &[u8]) -> Result<Option<Prf>> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "mask lengths differ: predicted {} vs gold {}",
            predicted.len(),
            gold.len()
        )));
    }
    let g = gold.iter().filter(|&&v| v == 1).count();
    if g == 0 {
        return Ok(None);
    }
    let p = predicted.iter().filter(|&&v| v == 1).count();
    let overlap = predicted
        .iter()
        .zip(gold)
        .filter(|(a, b)| **a == 1 && **b == 1)
        .count();
    Ok(Some(prf_from_counts(overlap, p, g)))
}

/// Token counts pooled over a split; P and R are ratios of the pooled counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PooledPrf {
    overlap: usize,
    predicted: usize,
    gold: usize,
}

impl PooledPrf {
    pub fn add(&mut self, predicted: &[u8], gold: &[u8]) -> Result<()> {
        if predicted.len() != gold.len() {
            return Err(Error::InvalidInput("mask lengths differ".into()));
        }
        if gold.iter().all(|&v| v == 0) {
            return Ok(());
        }
        self.overlap += predicted
            .iter()
            .zip(gold)
            .filter(|(a, b)| **a == 1 && **b == 1)
            .count();
        self.predicted += predicted.iter().filter(|&&v| v == 1).count();
        self.gold += gold.iter().filter(|&&v| v == 1).count();
        Ok(())
    }

    pub fn finish(&self) -> Prf {
        prf_from_counts(self.overlap, self.predicted, self.gold)
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub sparsity: f64,
    pub gen_grad_norm: f64,
    pub interventions: usize,
}

pub const CSV_COLUMNS: &str = "epoch,split,acc,p,r,f1,sparsity,gen_grad_norm,interventions";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.acc,
            self.p,
            self.r,
            self.f1,
            self.sparsity,
            self.gen_grad_norm,
            self.interventions
        )
    }
}

/// Full CSV text: a comment line naming the columns, the header, then rows.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("# columns (stable order): {CSV_COLUMNS}\n{CSV_COLUMNS}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
