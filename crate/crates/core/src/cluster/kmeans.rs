use rand::Rng;

use super::EmbeddingSet;
use crate::error::{FusionError, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(z: &EmbeddingSet, k: usize, rng: &mut rng::FusionRng) -> Vec<Vec<f64>> {
    let n = z.len();
    let mut centroids = vec![z.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(z.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = z.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(z.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments repeat or
/// after `max_iters` assignment steps. Empty clusters take the point farthest
/// from its current centroid.
pub fn kmeans(z: &EmbeddingSet, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = z.len();
    if k == 0 || k > n {
        return Err(FusionError::Contract(format!("k = {k} with {n} points")));
    }
    if max_iters == 0 {
        return Err(FusionError::Domain("max_iters must be positive".into()));
    }
    let mut rng = rng::stream(seed, streams::KMEANS);
    let mut centroids = plus_plus_init(z, k, &mut rng);
    let d = z.dim();
    let mut labels: Vec<usize> = Vec::new();
    let mut inertia_history = Vec::new();
    let mut converged = false;
    for iter in 0..max_iters {
        let assigned: Vec<(usize, f64)> = (0..n).map(|i| nearest(z.row(i), &centroids)).collect();
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        inertia_history.push(assigned.iter().map(|a| a.1).sum());
        if new_labels == labels {
            converged = true;
            break;
        }
        labels = new_labels;
        if iter + 1 == max_iters {
            break;
        }

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(z.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for i in 0..n {
                if !taken[i] && assigned[i].1 > far_d {
                    far = Some(i);
                    far_d = assigned[i].1;
                }
            }
            if let Some(i) = far {
                taken[i] = true;
                centroids[j] = z.row(i).to_vec();
            }
        }
    }
    Ok(KMeansResult { labels, centroids, inertia_history, converged })
}
