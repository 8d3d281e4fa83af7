use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gemm, MatView};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeans {
    pub k: usize,
    pub d: usize,
    /// Row-major `k x d`.
    pub centroids: Vec<f32>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum()
}

/// Index of the nearest centroid (lowest index on ties).
pub(crate) fn nearest(x: &[f32], centroids: &[f32], d: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let s: f32 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if s < best.1 {
            best = (j, s);
        }
    }
    best
}

/// Nearest centroid for every row. Wide vectors go through gemm using
/// `|c|^2 - 2 x.c`; narrow ones are compared directly.
pub(crate) fn assign_all(data: &[f32], centroids: &[f32], d: usize, out: &mut [usize]) {
    if d < 16 {
        for (x, o) in data.chunks_exact(d).zip(out.iter_mut()) {
            *o = nearest(x, centroids, d).0;
        }
        return;
    }
    let k = centroids.len() / d;
    let norms: Vec<f32> = centroids.chunks_exact(d).map(|c| c.iter().map(|v| v * v).sum()).collect();
    const CHUNK: usize = 2048;
    let mut cross = vec![0.0f32; CHUNK * k];
    for (ci, rows) in data.chunks(CHUNK * d).enumerate() {
        let n = rows.len() / d;
        gemm(
            1.0,
            MatView::rm(rows, n, d),
            MatView::rm(centroids, k, d).t(),
            0.0,
            &mut cross[..n * k],
        );
        for r in 0..n {
            let row = &cross[r * k..(r + 1) * k];
            let mut best = (0, f32::INFINITY);
            for (j, (&x, &nc)) in row.iter().zip(&norms).enumerate() {
                let s = nc - 2.0 * x;
                if s < best.1 {
                    best = (j, s);
                }
            }
            out[ci * CHUNK + r] = best.0;
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding. Clusters that lose all their
/// points are re-seeded at the point farthest from its own centroid.
pub fn kmeans(data: &[f32], d: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if d == 0 || !data.len().is_multiple_of(d) {
        return Err(Error::shape(format!("{} values do not form rows of width {d}", data.len())));
    }
    let n = data.len() / d;
    if k == 0 || n < k {
        return Err(Error::arg(format!("k-means needs at least k = {k} > 0 points, got {n}")));
    }
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut assign = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut objective = Vec::new();
    for _ in 0..iters.max(1) {
        assign_all(data, &centroids, d, &mut next);
        objective.push((0..n).map(|i| sq_dist(row(i), &centroids[next[i] * d..(next[i] + 1) * d])).sum());
        if next == assign {
            break;
        }
        assign.copy_from_slice(&next);
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                *s += f64::from(x);
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            let c = &mut centroids[j * d..(j + 1) * d];
            if counts[j] > 0 {
                for (cv, s) in c.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *cv = (s / counts[j] as f64) as f32;
                }
            }
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..n)
                .filter(|&i| !taken[i])
                .map(|i| (i, sq_dist(row(i), &centroids[assign[i] * d..(assign[i] + 1) * d])))
                .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b })
                .0;
            taken[far] = true;
            centroids[j * d..(j + 1) * d].copy_from_slice(row(far));
        }
    }
    Ok(KMeans { k, d, centroids, objective })
}
