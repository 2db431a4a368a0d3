//! Small deterministic k-means over window frames.
//!
//! Centroids start at evenly spaced points, iteration stops on a stable
//! assignment or after [`MAX_ITERATIONS`], and an empty cluster is re-seeded
//! with the point farthest from its current centroid.

use super::compression::uniform_frame_select;

pub const MAX_ITERATIONS: usize = 25;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Cluster assignment of each point after convergence.
pub fn kmeans(points: &[&[f32]], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points.first().map_or(0, |p| p.len());
    let mut centroids: Vec<Vec<f64>> = uniform_frame_select(points.len(), k)
        .into_iter()
        .map(|i| points[i].iter().map(|&x| x as f64).collect())
        .collect();
    let k = centroids.len();
    let mut assignment = vec![usize::MAX; points.len()];

    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, &x) in sums[j].iter_mut().zip(p.iter()) {
                *s += x as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
                continue;
            }
            // Re-seed: farthest point from its assigned centroid, ties to the earlier point.
            let mut far = (0, f64::NEG_INFINITY);
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(p, &centroids[assignment[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            centroids[j] = points[far.0].iter().map(|&x| x as f64).collect();
            assignment[far.0] = j;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    (centroids, assignment)
}

/// Per cluster, the point nearest its centroid; ascending, deduplicated.
pub fn kmeans_select(points: &[&[f32]], k: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    if k >= points.len() {
        return (0..points.len()).collect();
    }
    let (centroids, _) = kmeans(points, k);
    let mut kept: Vec<usize> = centroids
        .iter()
        .map(|c| {
            let mut best = (0, f64::INFINITY);
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    kept.sort_unstable();
    kept.dedup();
    kept
}
