//! Clustering evaluation against ground truth: Hungarian-matched accuracy,
//! NMI (arithmetic-mean normalization) and the adjusted Rand index, plus
//! the repeated-run protocol for judging cluster-count predictions.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub k_pred: usize,
    pub k_true: usize,
}

/// Contingency table between two labelings, rows = `pred` clusters,
/// columns = `truth` classes (both relabeled to first-seen order).
struct Contingency {
    counts: Vec<Vec<u64>>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    n: u64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency> {
    if pred.len() != truth.len() {
        return Err(dim("metrics", format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("cannot score empty labelings".into()));
    }
    let (p, kp) = compact(pred);
    let (t, kt) = compact(truth);
    let mut counts = vec![vec![0u64; kt]; kp];
    for (&a, &b) in p.iter().zip(&t) {
        counts[a][b] += 1;
    }
    let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..kt).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    Ok(Contingency { counts, row_sums, col_sums, n: pred.len() as u64 })
}

pub fn cluster_count(labels: &[usize]) -> usize {
    compact(labels).1
}

/// Fraction of nodes correctly labeled under the best one-to-one mapping of
/// clusters to classes; the table is zero-padded to square when counts differ.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let size = c.row_sums.len().max(c.col_sums.len());
    let mut weights = Matrix::new(size, size, 0i64);
    for (r, row) in c.counts.iter().enumerate() {
        for (col, &v) in row.iter().enumerate() {
            weights[(r, col)] = v as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / c.n as f64)
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter().filter(|&&s| s > 0).map(|&s| {
        let p = s as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let n = c.n as f64;
    let hp = entropy(&c.row_sums, n);
    let ht = entropy(&c.col_sums, n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (r, row) in c.counts.iter().enumerate() {
        for (col, &v) in row.iter().enumerate() {
            if v > 0 {
                let pij = v as f64 / n;
                mi += pij * (v as f64 * n / (c.row_sums[r] as f64 * c.col_sums[col] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (hp + ht);
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index under the permutation (hypergeometric) model.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = contingency(pred, truth)?;
    let index: f64 = c.counts.iter().flatten().map(|&v| comb2(v)).sum();
    let a: f64 = c.row_sums.iter().map(|&v| comb2(v)).sum();
    let b: f64 = c.col_sums.iter().map(|&v| comb2(v)).sum();
    let total = comb2(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<EvalResult> {
    Ok(EvalResult {
        acc: accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
        k_pred: cluster_count(pred),
        k_true: cluster_count(truth),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KProtocolResult {
    /// Predicted k per seed; `None` marks a failed run.
    pub runs: Vec<Option<usize>>,
    pub mean: f64,
    /// Population standard deviation over successful runs.
    pub std: f64,
    pub hits: usize,
    pub k_true: usize,
    pub failures: Vec<(u64, String)>,
}

/// Runs `runner` once per seed and summarizes the predicted cluster counts.
pub fn k_protocol<F>(mut runner: F, repetitions: usize, seeds: &[u64], k_true: usize) -> Result<KProtocolResult>
where
    F: FnMut(u64) -> Result<usize>,
{
    if seeds.len() != repetitions {
        return Err(Error::Parameter(format!("{} seeds for {repetitions} repetitions", seeds.len())));
    }
    let mut runs = Vec::with_capacity(repetitions);
    let mut failures = Vec::new();
    for &seed in seeds {
        match runner(seed) {
            Ok(k) => runs.push(Some(k)),
            Err(e) => {
                log::warn!("k-protocol run with seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
                runs.push(None);
            }
        }
    }
    let ok: Vec<f64> = runs.iter().flatten().map(|&k| k as f64).collect();
    let (mean, std) = if ok.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        let var = ok.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / ok.len() as f64;
        (mean, var.sqrt())
    };
    let hits = runs.iter().flatten().filter(|&&k| k == k_true).count();
    Ok(KProtocolResult { runs, mean, std, hits, k_true, failures })
}
