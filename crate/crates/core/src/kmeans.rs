//! Seeded k-means (k-means++ seeding, Lloyd iterations) used to initialize EM.

use rand::Rng as _;

use crate::rng::Rng;

/// Cluster labels for the rows of `points` (row-major, `dim` columns).
pub fn kmeans_labels(points: &[f64], dim: usize, k: usize, max_iter: usize, rng: &mut Rng) -> Vec<usize> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    if n == 0 || k <= 1 {
        return vec![0; n];
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(row(next).to_vec());
        let c = centers.last().unwrap().clone();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), &c));
        }
    }

    let mut labels = vec![0usize; n];
    for it in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let r = row(i);
            let best = (0..k)
                .min_by(|&a, &b| {
                    dist2(r, &centers[a])
                        .partial_cmp(&dist2(r, &centers[b]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed && it > 0 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at a random point.
                centers[c] = row(rng.random_range(0..n)).to_vec();
            } else {
                for (dst, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    labels
}
