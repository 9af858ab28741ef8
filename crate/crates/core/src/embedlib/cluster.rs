use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub history: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_centroids(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.gen_range(0..data.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = data.iter().map(|x| nearest(x, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = d.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.gen_range(0..data.len())
        };
        centroids.push(data[pick].clone());
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ seeding. A cluster that loses all its
/// points is re-seeded at the point farthest from its centroid.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Invalid("k must be positive".into()));
    }
    if k > data.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds {} points", data.len())));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invalid("points must share one dimension and be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(data, k, &mut rng);
    let mut assignments: Vec<usize> = data.iter().map(|x| nearest(x, &centroids).0).collect();
    let mut history = Vec::new();
    for iter in 0..max_iters.max(1) {
        if iter > 0 {
            let next: Vec<usize> = data.iter().map(|x| nearest(x, &centroids).0).collect();
            if next == assignments {
                break;
            }
            assignments = next;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..data.len())
                    .max_by(|&a, &b| {
                        dist2(&data[a], &centroids[assignments[a]])
                            .total_cmp(&dist2(&data[b], &centroids[assignments[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("data is non-empty");
                centroids[j] = data[far].clone();
            }
        }
        history.push(data.iter().zip(&assignments).map(|(x, &a)| dist2(x, &centroids[a])).sum());
    }
    let inertia = data.iter().zip(&assignments).map(|(x, &a)| dist2(x, &centroids[a])).sum();
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
        history,
    })
}

/// Share of points whose label is the majority label of their cluster.
pub fn purity<L: Eq + std::hash::Hash>(assignments: &[usize], labels: &[L]) -> Result<f64> {
    if assignments.len() != labels.len() || assignments.is_empty() {
        return Err(Error::Invalid("purity needs one label per assigned point".into()));
    }
    let mut counts: HashMap<usize, HashMap<&L, usize>> = HashMap::new();
    for (a, l) in assignments.iter().zip(labels) {
        *counts.entry(*a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / assignments.len() as f64)
}
