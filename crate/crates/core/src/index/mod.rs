//! Fingerprint storage and maximum inner-product search: an exhaustive
//! reference, k-means, product quantization and the IVF-PQ index.

mod db;
mod ivf;
mod kmeans;
mod pq;

pub use db::{sidecar_path, FingerprintDb, SegmentMeta, DB_MAGIC};
pub use ivf::{IvfPqIndex, IvfPqParams, SearchOutcome, INDEX_MAGIC};
pub use kmeans::{kmeans, KMeans};
pub use pq::{ProductQuantizer, PQ_KSUB};

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// One search result: a database row and its (possibly approximate) score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f32,
}

/// Plain sequential inner product; every exact score in the crate goes
/// through here so that equal inputs always give bitwise-equal scores.
pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descending score, then ascending index.
pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Keeps the best `k` hits in rank order.
pub(crate) fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    hits
}

/// Exact top-`k` by inner product over row-major `vectors` of width `d`.
pub fn mips_exhaustive(vectors: &[f32], d: usize, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    if vectors.is_empty() || d == 0 {
        return Err(Error::EmptyDatabase);
    }
    if query.len() != d {
        return Err(Error::shape(format!("query has dimension {}, database {d}", query.len())));
    }
    let hits = vectors
        .chunks_exact(d)
        .enumerate()
        .map(|(index, v)| Hit { index, score: inner_product(query, v) })
        .collect();
    Ok(top_k(hits, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit_vectors(n: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f32> = (0..n * d).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
        for row in v.chunks_mut(d) {
            let n = inner_product(row, row).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    #[test]
    fn basis_vectors() {
        let d = 8;
        let mut db = vec![0.0f32; d * d];
        for i in 0..d {
            db[i * d + i] = 1.0;
        }
        let mut q = vec![0.0f32; d];
        q[2] = 1.0;
        let hits = mips_exhaustive(&db, d, &q, 3).unwrap();
        assert_eq!(hits[0], Hit { index: 2, score: 1.0 });
        q[2] = -1.0;
        let hits = mips_exhaustive(&db, d, &q, 8).unwrap();
        // Seven zero scores tie; lower indices win.
        assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), [0, 1, 3, 4, 5, 6, 7, 2]);
    }

    #[test]
    fn matches_naive_argmax() {
        let (n, d) = (10_000, 32);
        let db = random_unit_vectors(n, d, 1);
        let queries = random_unit_vectors(50, d, 2);
        for q in queries.chunks(d) {
            let mut best = (f32::NEG_INFINITY, 0);
            for i in 0..n {
                let s: f32 = (0..d).map(|c| q[c] * db[i * d + c]).sum();
                if s > best.0 {
                    best = (s, i);
                }
            }
            let hit = mips_exhaustive(&db, d, q, 1).unwrap()[0];
            assert_eq!((hit.score, hit.index), best);
        }
    }

    #[test]
    fn k_larger_than_db_and_errors() {
        let db = random_unit_vectors(5, 4, 3);
        let hits = mips_exhaustive(&db, 4, &db[..4], 20).unwrap();
        assert_eq!(hits.len(), 5);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(mips_exhaustive(&[], 4, &db[..4], 1), Err(Error::EmptyDatabase)));
        assert!(mips_exhaustive(&db, 4, &db[..3], 1).is_err());
    }

    #[test]
    fn ip_order_is_distance_order_for_unit_vectors() {
        let d = 16;
        let db = random_unit_vectors(200, d, 4);
        let q = &random_unit_vectors(1, d, 5)[..];
        let hits = mips_exhaustive(&db, d, q, 200).unwrap();
        let dist = |i: usize| -> f64 {
            (0..d).map(|c| f64::from(q[c] - db[i * d + c]).powi(2)).sum()
        };
        assert!(hits.windows(2).all(|w| dist(w[0].index) <= dist(w[1].index) + 1e-6));
    }
}
