use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::pq::{ProductQuantizer, PQ_KSUB};
use super::{inner_product, top_k, Hit};
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader, ByteWriter};

pub const INDEX_MAGIC: &[u8; 8] = b"NAFPIX01";

const FLAG_RESIDUAL: u32 = 1;
const FLAG_RAW: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IvfPqParams {
    pub nlist: usize,
    /// Sub-quantizer count; by default 64 when `d` is a multiple of 64,
    /// else `d`.
    pub m: Option<usize>,
    pub nprobe: usize,
    /// Quantize residuals from the coarse centroid instead of raw vectors.
    pub residual: bool,
    /// Keep raw vectors and score with them exactly (debug mode).
    pub keep_raw: bool,
    pub kmeans_iters: usize,
    /// Cap on vectors used to train each quantizer.
    pub max_train: usize,
    pub seed: u64,
}

impl Default for IvfPqParams {
    fn default() -> Self {
        Self {
            nlist: 200,
            m: None,
            nprobe: 20,
            residual: false,
            keep_raw: false,
            kmeans_iters: 20,
            max_train: 25_000,
            seed: 0,
        }
    }
}

impl IvfPqParams {
    pub fn resolve_m(&self, d: usize) -> usize {
        self.m.unwrap_or(if d.is_multiple_of(64) { 64 } else { d })
    }
}

/// Results of one approximate query.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub hits: Vec<Hit>,
    /// Fewer than `k` entries lived in the probed lists.
    pub short: bool,
}

/// Inverted file over unit-normalized k-means cells; entries carry PQ codes
/// and are scored by asymmetric inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    d: usize,
    nprobe: usize,
    flags: u32,
    count: usize,
    /// `nlist x d`, each row unit norm.
    centroids: Vec<f32>,
    pq: ProductQuantizer,
    lists: Vec<Vec<u32>>,
    codes: Vec<Vec<u8>>,
    raw: Option<Vec<f32>>,
}

fn normalize_rows(v: &mut [f32], d: usize) {
    for row in v.chunks_mut(d) {
        let n = inner_product(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Cell of each vector: the centroid of largest inner product.
fn assign_ip(centroids: &[f32], d: usize, v: &[f32]) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let s = inner_product(v, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

impl IvfPqIndex {
    pub fn build(vectors: &[f32], d: usize, params: &IvfPqParams) -> Result<Self> {
        if d == 0 || !vectors.len().is_multiple_of(d) {
            return Err(Error::shape(format!("{} values do not form rows of width {d}", vectors.len())));
        }
        let count = vectors.len() / d;
        if count == 0 {
            return Err(Error::EmptyDatabase);
        }
        if count > u32::MAX as usize {
            return Err(Error::arg("too many vectors for 32-bit ids"));
        }
        let nlist = params.nlist;
        if nlist == 0 || params.nprobe == 0 || params.nprobe > nlist {
            return Err(Error::arg(format!("need 0 < nprobe <= nlist, got {} and {nlist}", params.nprobe)));
        }
        let m = params.resolve_m(d);
        let train = sample_rows(vectors, d, params.max_train, params.seed);
        let mut centroids = kmeans(&train, d, nlist, params.kmeans_iters, params.seed)?.centroids;
        normalize_rows(&mut centroids, d);

        // With unit-norm centroids, largest inner product is also nearest
        // by distance for unit-norm vectors.
        let cells: Vec<usize> = vectors.chunks_exact(d).map(|v| assign_ip(&centroids, d, v)).collect();
        let residual = |i: usize| -> Vec<f32> {
            let c = &centroids[cells[i] * d..(cells[i] + 1) * d];
            vectors[i * d..(i + 1) * d].iter().zip(c).map(|(v, c)| v - c).collect()
        };
        let pq = if params.residual {
            let res: Vec<f32> = (0..count).flat_map(residual).collect();
            ProductQuantizer::train(&res, d, m, params.kmeans_iters, params.max_train, params.seed ^ 0x5eed)?
        } else {
            ProductQuantizer::train(vectors, d, m, params.kmeans_iters, params.max_train, params.seed ^ 0x5eed)?
        };
        let mut lists = vec![Vec::new(); nlist];
        let mut codes = vec![Vec::new(); nlist];
        for i in 0..count {
            let code = if params.residual {
                pq.encode(&residual(i))
            } else {
                pq.encode(&vectors[i * d..(i + 1) * d])
            };
            lists[cells[i]].push(i as u32);
            codes[cells[i]].extend_from_slice(&code);
        }
        let flags = (u32::from(params.residual) * FLAG_RESIDUAL) | (u32::from(params.keep_raw) * FLAG_RAW);
        Ok(Self {
            d,
            nprobe: params.nprobe,
            flags,
            count,
            centroids,
            pq,
            lists,
            codes,
            raw: params.keep_raw.then(|| vectors.to_vec()),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn m(&self) -> usize {
        self.pq.m()
    }

    pub fn nbits(&self) -> u32 {
        8
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn set_nprobe(&mut self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::arg(format!("nprobe must be in 1..={}", self.nlist())));
        }
        self.nprobe = nprobe;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_residual(&self) -> bool {
        self.flags & FLAG_RESIDUAL != 0
    }

    pub fn has_raw(&self) -> bool {
        self.raw.is_some()
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    pub fn quantizer(&self) -> &ProductQuantizer {
        &self.pq
    }

    /// Approximate reconstruction of row `i`, or `None` if absent.
    pub fn reconstruct(&self, i: usize) -> Option<Vec<f32>> {
        for (j, list) in self.lists.iter().enumerate() {
            if let Some(pos) = list.iter().position(|&x| x as usize == i) {
                let m = self.m();
                let mut v = self.pq.decode(&self.codes[j][pos * m..(pos + 1) * m]);
                if self.is_residual() {
                    let c = &self.centroids[j * self.d..(j + 1) * self.d];
                    v.iter_mut().zip(c).for_each(|(x, c)| *x += c);
                }
                return Some(v);
            }
        }
        None
    }

    /// Top-`k` over the `nprobe` cells whose centroids have the largest inner
    /// product with the query.
    pub fn search(&self, query: &[f32], k: usize) -> Result<SearchOutcome> {
        self.search_with(query, k, self.nprobe)
    }

    pub fn search_with(&self, query: &[f32], k: usize, nprobe: usize) -> Result<SearchOutcome> {
        if query.len() != self.d {
            return Err(Error::shape(format!("query has dimension {}, index {}", query.len(), self.d)));
        }
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::arg(format!("nprobe must be in 1..={}", self.nlist())));
        }
        let cell_hits: Vec<Hit> = self
            .centroids
            .chunks_exact(self.d)
            .enumerate()
            .map(|(index, c)| Hit { index, score: inner_product(query, c) })
            .collect();
        let probes = top_k(cell_hits, nprobe);
        let table = if self.raw.is_none() { self.pq.ip_table(query) } else { Vec::new() };
        let m = self.m();
        let mut hits = Vec::new();
        for probe in probes {
            let list = &self.lists[probe.index];
            let base = if self.is_residual() { probe.score } else { 0.0 };
            for (pos, &id) in list.iter().enumerate() {
                let score = match &self.raw {
                    Some(raw) => inner_product(query, &raw[id as usize * self.d..(id as usize + 1) * self.d]),
                    None => base + ProductQuantizer::adc(&table, &self.codes[probe.index][pos * m..(pos + 1) * m]),
                };
                hits.push(Hit { index: id as usize, score });
            }
        }
        let short = hits.len() < k;
        Ok(SearchOutcome { hits: top_k(hits, k), short })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(INDEX_MAGIC);
        w.u32(self.d as u32);
        w.u32(self.nlist() as u32);
        w.u32(self.m() as u32);
        w.u8(self.nbits() as u8);
        w.u32(self.flags);
        w.u32(self.nprobe as u32);
        w.u64(self.count as u64);
        w.f32s(&self.centroids);
        w.f32s(self.pq.codebooks());
        for (list, codes) in self.lists.iter().zip(&self.codes) {
            w.varint(list.len() as u64);
            let mut prev = 0u64;
            for &id in list {
                w.varint(u64::from(id) - prev);
                prev = u64::from(id);
            }
            w.bytes(codes);
        }
        if let Some(raw) = &self.raw {
            w.f32s(raw);
        }
        w.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(INDEX_MAGIC)?;
        let d = r.u32("dimension")? as usize;
        let nlist = r.u32("nlist")? as usize;
        let m = r.u32("m")? as usize;
        let nbits = r.u8("nbits")?;
        let flags = r.u32("flags")?;
        let nprobe = r.u32("nprobe")? as usize;
        let count = usize::try_from(r.u64("count")?).map_err(|_| r.format_err("count overflows"))?;
        if nbits != 8 {
            return Err(r.format_err(format!("unsupported code width {nbits} bits")));
        }
        if d == 0 || m == 0 || !d.is_multiple_of(m) || nlist == 0 || nprobe == 0 || nprobe > nlist || flags & !3 != 0 {
            return Err(r.format_err("inconsistent header"));
        }
        let centroids = r.f32s(nlist.checked_mul(d).ok_or_else(|| r.format_err("nlist overflows"))?, "centroids")?;
        let books = r.f32s(d * PQ_KSUB, "codebooks")?;
        let pq = ProductQuantizer::from_parts(d, m, books).map_err(|e| r.format_err(e.to_string()))?;
        let mut lists = Vec::with_capacity(nlist);
        let mut codes = Vec::with_capacity(nlist);
        let mut seen = vec![false; count];
        for _ in 0..nlist {
            let len = r.varint("list length")? as usize;
            if len > count {
                return Err(r.format_err("posting list longer than the index"));
            }
            let mut list = Vec::with_capacity(len);
            let mut prev = 0u64;
            for _ in 0..len {
                let id = prev + r.varint("posting id")?;
                if id as usize >= count || seen[id as usize] {
                    return Err(r.format_err(format!("posting id {id} is out of range or repeated")));
                }
                seen[id as usize] = true;
                list.push(id as u32);
                prev = id;
            }
            lists.push(list);
            codes.push(r.bytes(len * m, "codes")?.to_vec());
        }
        if seen.iter().any(|s| !s) {
            return Err(r.format_err("some vectors are missing from the posting lists"));
        }
        let raw = if flags & FLAG_RAW != 0 { Some(r.f32s(count * d, "raw vectors")?) } else { None };
        r.finish()?;
        Ok(Self { d, nprobe, flags, count, centroids, pq, lists, codes, raw })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// Up to `max` rows sampled without replacement, in original order.
fn sample_rows(vectors: &[f32], d: usize, max: usize, seed: u64) -> Vec<f32> {
    use rand::SeedableRng;
    let n = vectors.len() / d;
    if n <= max {
        return vectors.to_vec();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, max).into_vec();
    rows.sort_unstable();
    rows.iter().flat_map(|&r| vectors[r * d..(r + 1) * d].iter().copied()).collect()
}
