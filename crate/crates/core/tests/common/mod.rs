//! Brute-force reference implementations used as test oracles.

#![allow(dead_code)]

pub mod objective;

use gcma_core::numeric::Tensor2;

fn dist(points: &Tensor2, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..points.cols() {
        let d = points.get(i, c) - points.get(j, c);
        s += d * d;
    }
    s.sqrt()
}

/// Percentile of all unordered pairwise distances, by full sort.
pub fn ref_cutoff(points: &Tensor2, percentile: f64) -> f64 {
    let n = points.rows();
    let mut all = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            all.push(dist(points, i, j));
        }
    }
    all.sort_by(f64::total_cmp);
    let idx = (percentile / 100.0 * all.len() as f64).ceil() as usize;
    all[idx.max(1).min(all.len()) - 1]
}

#[derive(Debug, PartialEq)]
pub struct RefPeaks {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub nn: Vec<Option<usize>>,
    pub centers: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Quadratic density peaks: every quantity is recomputed from point
/// coordinates with plain double loops and no shared sorting.
pub fn ref_peaks(points: &Tensor2, d_c: f64) -> RefPeaks {
    let n = points.rows();
    let mut rho = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let r = dist(points, i, j) / d_c;
                rho[i] += (-r * r).exp();
            }
        }
    }
    let denser = |j: usize, i: usize| rho[j] > rho[i] || (rho[j] == rho[i] && j < i);
    let mut delta = vec![0.0; n];
    let mut nn = vec![None; n];
    let mut top = None;
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if j != i && denser(j, i) {
                let d = dist(points, i, j);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        match best {
            Some((d, j)) => {
                delta[i] = d;
                nn[i] = Some(j);
            }
            None => {
                delta[i] = (0..n).map(|j| dist(points, i, j)).fold(0.0, f64::max);
                top = Some(i);
            }
        }
    }
    let top = top.unwrap();

    let mut capped = delta.clone();
    if n > 1 {
        capped[top] = (0..n).filter(|&i| i != top).map(|i| delta[i]).fold(f64::NEG_INFINITY, f64::max);
    }
    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 }).collect()
    };
    let (r, d) = (norm(&rho), norm(&capped));
    let g: Vec<f64> = (0..n).map(|i| r[i] * d[i]).collect();
    let mean = g.iter().sum::<f64>() / n as f64;

    // Rank by selection: repeatedly take the best remaining score.
    let mut ranked = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut pick = None;
        for i in 0..n {
            if !used[i] && pick.is_none_or(|p: usize| g[i] > g[p]) {
                pick = Some(i);
            }
        }
        used[pick.unwrap()] = true;
        ranked.push(pick.unwrap());
    }
    let mut k = 1;
    let mut best = f64::NEG_INFINITY;
    for m in 1..=(n - 1).min(64) {
        if g[ranked[m - 1]] <= mean {
            break;
        }
        if g[ranked[m]] > 0.0 && g[ranked[m - 1]] / g[ranked[m]] > best {
            best = g[ranked[m - 1]] / g[ranked[m]];
            k = m;
        }
    }
    let centers = ranked[..k].to_vec();

    let labels = (0..n)
        .map(|i| {
            let mut cur = i;
            loop {
                if let Some(c) = centers.iter().position(|&c| c == cur) {
                    break c;
                }
                cur = nn[cur].unwrap();
            }
        })
        .collect();
    RefPeaks { rho, delta, nn, centers, labels }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Best matched fraction over every bijection of the padded label sets.
pub fn brute_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().map_or(1, |m| m + 1);
    let mut best = 0;
    for perm in permutations(k) {
        let hits = pred.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count();
        best = best.max(hits);
    }
    best as f64 / pred.len() as f64
}
