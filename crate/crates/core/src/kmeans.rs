//! Lloyd's algorithm with k-means++ seeding, seeded and deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub const MAX_ITERS: usize = 100;
pub const REL_SHIFT_STOP: f64 = 1e-6;

/// Returns `k` centroids. With fewer than `k` distinct points, duplicate
/// centroids are returned rather than failing.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if points.is_empty() {
        return Err(Error::Input("kmeans on empty point set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Input(format!(
            "k = {k} outside 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass at existing centroids: duplicate a point
            rng.gen_range(0..points.len())
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; points.len()];
    for _ in 0..MAX_ITERS {
        // assign (lowest centroid index wins ties)
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        // update
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut shift = 0.0f64;
        let mut norm = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let new: Vec<f32> = sums[c]
                .iter()
                .map(|&s| (s / counts[c] as f64) as f32)
                .collect();
            shift += sq_dist(&new, &centroids[c]).sqrt();
            norm += centroids[c].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            centroids[c] = new;
        }
        if shift <= REL_SHIFT_STOP * norm.max(1e-12) {
            break;
        }
    }
    Ok(centroids)
}

/// Cluster membership under the final centroids (lowest index wins ties).
pub fn assign(points: &[Vec<f32>], centroids: &[Vec<f32>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}
