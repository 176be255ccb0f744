//! Label-agreement metrics: Hungarian-matched accuracy, NMI and F-score.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Relabels arbitrary ids to `0..k` in order of first appearance.
fn compact(labels: &[u32]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Contingency table `counts[pred][true]` over compacted labels.
pub fn contingency(y_true: &[u32], y_pred: &[u32]) -> Result<Vec<Vec<u64>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "label arrays differ in length ({} vs {})",
            y_true.len(),
            y_pred.len()
        )));
    }
    let (t, kt) = compact(y_true);
    let (p, kp) = compact(y_pred);
    let mut counts = vec![vec![0u64; kt]; kp];
    for (a, b) in t.iter().zip(&p) {
        counts[*b][*a] += 1;
    }
    Ok(counts)
}

/// Minimum-cost perfect assignment on a square matrix; returns `col[row]`.
///
/// Shortest augmenting path formulation with potentials, O(n³).
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            col[owner[j] - 1] = j - 1;
        }
    }
    col
}

/// Largest total count over one-to-one cluster→class maps.
fn best_matching(counts: &[Vec<u64>]) -> u64 {
    let k = counts.len().max(counts.first().map_or(0, Vec::len));
    let mut cost = vec![vec![0i64; k]; k];
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i][j] = -(c as i64);
        }
    }
    let assignment = hungarian(&cost);
    assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < counts.len() && j < counts[i].len())
        .map(|(i, &j)| counts[i][j])
        .sum()
}

/// Clustering accuracy under the optimal one-to-one relabeling of `y_pred`.
/// Cluster and class counts may differ; unmatched clusters score nothing.
pub fn hungarian_accuracy(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::invalid("accuracy of empty label arrays"));
    }
    let counts = contingency(y_true, y_pred)?;
    Ok(best_matching(&counts) as f64 / y_true.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(Y;C) / ((H(Y) + H(C)) / 2)` in nats.
/// Zero when either labeling has zero entropy.
pub fn nmi(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    let counts = contingency(y_true, y_pred)?;
    if y_true.is_empty() {
        return Ok(0.0);
    }
    let n = y_true.len() as f64;
    let pred_marg: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let kt = counts.first().map_or(0, Vec::len);
    let true_marg: Vec<u64> = (0..kt).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let h_true = entropy(true_marg.iter().copied(), n);
    let h_pred = entropy(pred_marg.iter().copied(), n);
    if h_true <= 0.0 || h_pred <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (c * n / (pred_marg[i] as f64 * true_marg[j] as f64)).ln();
        }
    }
    Ok((mi / (0.5 * (h_true + h_pred))).clamp(0.0, 1.0))
}

/// Binary F-score from counts; 0 when `tp == 0`.
pub fn f_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with a single rounding
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

/// Per-class `(tp, fp, fn)` for every label present in either array, sorted by label.
pub fn per_class_counts(y_true: &[u32], y_pred: &[u32]) -> Result<Vec<(u32, u64, u64, u64)>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape("label arrays differ in length"));
    }
    let mut labels: Vec<u32> = y_true.iter().chain(y_pred).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    Ok(labels
        .into_iter()
        .map(|l| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for (&t, &p) in y_true.iter().zip(y_pred) {
                match (t == l, p == l) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            (l, tp, fp, fn_)
        })
        .collect())
}

/// Unweighted mean of per-class F-scores.
pub fn macro_f_score(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::invalid("F-score of empty label arrays"));
    }
    let per = per_class_counts(y_true, y_pred)?;
    Ok(per.iter().map(|&(_, tp, fp, fn_)| f_score(tp, fp, fn_)).sum::<f64>() / per.len() as f64)
}

/// Plain accuracy.
pub fn accuracy(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::shape("accuracy needs equal, non-empty label arrays"));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}
