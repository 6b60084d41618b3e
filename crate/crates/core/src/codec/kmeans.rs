//! Plain Lloyd k-means with deterministic tie-breaking.

use rand::Rng as _;

use crate::rng::Rng;

/// Squared distance, accumulated in f64.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
#[inline]
pub(crate) fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Fills `centroids` beyond the first `filled` rows by k-means++ seeding.
/// When every point coincides with a centroid the remaining rows copy row 0.
pub(crate) fn seed_plus_plus(points: &[f64], dim: usize, centroids: &mut [f64], filled: usize, rng: &mut Rng) {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    if n == 0 || k == 0 {
        return;
    }
    let mut start = filled;
    if start == 0 {
        let i = rng.random_range(0..n);
        centroids[..dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
        start = 1;
    }
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| nearest(p, &centroids[..start * dim], dim).1)
        .collect();
    for j in start..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            let first = centroids[..dim].to_vec();
            centroids[j * dim..(j + 1) * dim].copy_from_slice(&first);
            continue;
        };
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&c);
        for (i, p) in points.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
    }
}

/// Lloyd iterations from the given centroids. Empty clusters are reseeded
/// from the point farthest from its centroid. Returns the final assignment.
pub(crate) fn lloyd(points: &[f64], dim: usize, centroids: &mut [f64], iters: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let k = centroids.len() / dim;
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (j, d) = nearest(p, centroids, dim);
            if assign[i] != j {
                changed = true;
            }
            assign[i] = j;
            dist[i] = d;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let j = assign[i];
            counts[j] += 1;
            for (s, x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut reseeded = false;
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                {
                    *c = s / counts[j] as f64;
                }
                continue;
            }
            // farthest point, lowest index on ties
            let mut far = None;
            let mut far_d = 0.0;
            for (i, &d) in dist.iter().enumerate() {
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
            if let Some(i) = far {
                centroids[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
                dist[i] = 0.0;
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    for (i, p) in points.chunks_exact(dim).enumerate() {
        assign[i] = nearest(p, centroids, dim).0;
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..50 {
            let e = (i % 5) as f64 * 0.01;
            pts.extend([e, 0.0]);
            pts.extend([10.0 + e, 10.0]);
        }
        let mut c = vec![0.0; 4];
        let mut rng = Rng::seed_from_u64(1);
        seed_plus_plus(&pts, 2, &mut c, 0, &mut rng);
        let a = lloyd(&pts, 2, &mut c, 20);
        for i in 0..50 {
            assert_ne!(a[2 * i], a[2 * i + 1]);
            assert_eq!(a[2 * i], a[0]);
        }
    }

    #[test]
    fn nearest_prefers_lowest_index_on_tie() {
        let c = [1.0, 0.0, -1.0, 0.0];
        assert_eq!(nearest(&[0.0, 0.0], &c, 2).0, 0);
    }

    #[test]
    fn identical_points_fill_with_duplicates() {
        let pts = vec![2.0; 10];
        let mut c = vec![0.0; 6];
        seed_plus_plus(&pts, 2, &mut c, 0, &mut Rng::seed_from_u64(3));
        assert!(c.iter().all(|&x| x == 2.0));
    }
}
