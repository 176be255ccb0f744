//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `(k, d)` row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(point, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn distinct_rows(x: &[f64], d: usize) -> usize {
    let mut rows: Vec<&[f64]> = x.chunks(d).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup();
    rows.len()
}

/// k-means++ initial centroids.
fn seed_centroids<R: Rng + ?Sized>(x: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = x.len() / d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = x.chunks(d).map(|p| sq_dist(p, &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x[pick * d..(pick + 1) * d].to_vec();
        for (i, p) in x.chunks(d).enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters the rows of `x: (n, d)` into `k` groups.
///
/// Stops when assignments no longer change or after `max_iter` Lloyd steps. An empty
/// cluster is re-seeded with the point farthest from its centroid.
pub fn kmeans<R: Rng + ?Sized>(
    x: &[f64],
    d: usize,
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<KMeans> {
    if d == 0 || x.is_empty() || x.len() % d != 0 {
        return Err(Error::shape("k-means input must be a non-empty (n, d) array"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let n = x.len() / d;
    let distinct = distinct_rows(x, d);
    if k > distinct {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {distinct} distinct samples"
        )));
    }
    let mut centroids = seed_centroids(x, d, k, rng);
    let mut assignments = vec![u32::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, p) in x.chunks(d).enumerate() {
            let (j, _) = nearest(p, &centroids, d);
            if assignments[i] != j as u32 {
                assignments[i] = j as u32;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, p) in x.chunks(d).enumerate() {
            let j = assignments[i] as usize;
            counts[j] += 1;
            for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = x
                .chunks(d)
                .enumerate()
                .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i] as usize * d..][..d])))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            centroids.splice(j * d..(j + 1) * d, x[far * d..(far + 1) * d].iter().copied());
            assignments[far] = j as u32;
        }
    }
    let inertia = x
        .chunks(d)
        .enumerate()
        .map(|(i, p)| sq_dist(p, &centroids[assignments[i] as usize * d..][..d]))
        .sum();
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}
