use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::{kmeans, nearest};
use crate::error::{Error, Result};

/// Centroids per subspace; codes are one byte each.
pub const PQ_KSUB: usize = 256;

/// `m` independent 256-word codebooks over `d / m`-dimensional subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    d: usize,
    m: usize,
    /// `m x 256 x (d / m)`, row-major.
    codebooks: Vec<f32>,
}

impl ProductQuantizer {
    /// Trains on at most `max_train` rows sampled from `data`.
    pub fn train(data: &[f32], d: usize, m: usize, iters: usize, max_train: usize, seed: u64) -> Result<Self> {
        if m == 0 || !d.is_multiple_of(m) {
            return Err(Error::arg(format!("d = {d} is not divisible into m = {m} subspaces")));
        }
        let n = data.len() / d;
        if n < PQ_KSUB {
            return Err(Error::arg(format!("product quantizer needs >= {PQ_KSUB} training vectors, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<usize> = if n > max_train.max(PQ_KSUB) {
            let mut r = sample(&mut rng, n, max_train.max(PQ_KSUB)).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let ds = d / m;
        let mut codebooks = Vec::with_capacity(m * PQ_KSUB * ds);
        let mut sub = Vec::with_capacity(rows.len() * ds);
        for s in 0..m {
            sub.clear();
            for &r in &rows {
                sub.extend_from_slice(&data[r * d + s * ds..r * d + (s + 1) * ds]);
            }
            let km = kmeans(&sub, ds, PQ_KSUB, iters, seed.wrapping_add(s as u64 + 1))?;
            codebooks.extend_from_slice(&km.centroids);
        }
        Ok(Self { d, m, codebooks })
    }

    pub fn from_parts(d: usize, m: usize, codebooks: Vec<f32>) -> Result<Self> {
        if m == 0 || !d.is_multiple_of(m) || codebooks.len() != d * PQ_KSUB {
            return Err(Error::shape(format!("bad codebook shape for d = {d}, m = {m}")));
        }
        Ok(Self { d, m, codebooks })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sub_dim(&self) -> usize {
        self.d / self.m
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    fn codebook(&self, s: usize) -> &[f32] {
        let w = PQ_KSUB * self.sub_dim();
        &self.codebooks[s * w..(s + 1) * w]
    }

    pub fn centroid(&self, s: usize, j: usize) -> &[f32] {
        let ds = self.sub_dim();
        &self.codebook(s)[j * ds..(j + 1) * ds]
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        let ds = self.sub_dim();
        (0..self.m)
            .map(|s| nearest(&v[s * ds..(s + 1) * ds], self.codebook(s), ds).0 as u8)
            .collect()
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        code.iter()
            .enumerate()
            .flat_map(|(s, &j)| self.centroid(s, usize::from(j)).iter().copied())
            .collect()
    }

    /// Per-query table of subvector-to-centroid inner products, `m x 256`.
    pub fn ip_table(&self, q: &[f32]) -> Vec<f32> {
        let ds = self.sub_dim();
        let mut t = Vec::with_capacity(self.m * PQ_KSUB);
        for s in 0..self.m {
            let qs = &q[s * ds..(s + 1) * ds];
            t.extend(self.codebook(s).chunks_exact(ds).map(|c| super::inner_product(qs, c)));
        }
        t
    }

    /// Asymmetric inner product of the query behind `table` with `code`.
    pub fn adc(table: &[f32], code: &[u8]) -> f32 {
        code.iter()
            .enumerate()
            .map(|(s, &j)| table[s * PQ_KSUB + usize::from(j)])
            .sum()
    }
}
