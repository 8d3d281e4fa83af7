//! Sequence-level search. Each query segment is looked up on its own; every
//! hit `idx` for segment `i` votes for the start `idx - i`, and each voted
//! start `c` is scored by `sum_i q_i . v_{c+i}` over the query's L segments.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::encoder::{Encoder, Fingerprint};
use crate::error::{Error, Result};
use crate::frontend::FeatureExtractor;
use crate::index::{inner_product, mips_exhaustive, FingerprintDb, Hit, IvfPqIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Hits gathered per query segment.
    pub k: usize,
    /// Search the db exhaustively even when an index is loaded.
    pub exhaustive: bool,
    /// Also try the query shifted by 1/4, 1/2 and 3/4 of a hop and keep the
    /// best-scoring alignment.
    pub oversample: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { k: 20, exhaustive: false, oversample: false }
    }
}

/// Segment-level backend.
#[derive(Debug, Clone, Copy)]
pub enum SegmentIndex<'a> {
    Exhaustive(&'a FingerprintDb),
    IvfPq(&'a IvfPqIndex),
}

pub fn segment_topk(index: SegmentIndex<'_>, q: &[f32], k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    match index {
        SegmentIndex::Exhaustive(db) => mips_exhaustive(db.vectors(), db.dim(), q, k),
        SegmentIndex::IvfPq(ix) => Ok(ix.search(q, k)?.hits),
    }
}

/// Unique non-negative start candidates `idx - i`, ascending.
pub fn compensate_offsets(lists: &[Vec<usize>]) -> Vec<usize> {
    let mut c: Vec<usize> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, list)| list.iter().filter_map(move |&idx| idx.checked_sub(i)))
        .collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Drops candidates whose `len` segments would run past the end of a track.
pub fn within_tracks(db: &FingerprintDb, candidates: &[usize], len: usize) -> Vec<usize> {
    candidates.iter().copied().filter(|&c| db.same_track_run(c, len)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub db_start_index: usize,
    pub score: f32,
    pub track_id: u32,
    pub time_offset_seconds: f64,
    pub per_segment_scores: Vec<f32>,
}

fn score_at(db: &FingerprintDb, queries: &[&[f32]], c: usize) -> SearchResult {
    let per: Vec<f32> = queries.iter().enumerate().map(|(i, q)| inner_product(q, db.vector(c + i))).collect();
    SearchResult {
        db_start_index: c,
        score: per.iter().sum(),
        track_id: db.meta(c).track_id,
        time_offset_seconds: db.start_secs(c),
        per_segment_scores: per,
    }
}

/// Scores every candidate against the raw db vectors; best first, ties to
/// the lower start.
pub fn score_candidates(db: &FingerprintDb, queries: &[&[f32]], candidates: &[usize]) -> Vec<SearchResult> {
    let mut out: Vec<SearchResult> = candidates.iter().map(|&c| score_at(db, queries, c)).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.db_start_index.cmp(&b.db_start_index)));
    out
}

/// Full sequence search over precomputed query fingerprints.
pub fn search_sequence(
    db: &FingerprintDb,
    index: SegmentIndex<'_>,
    queries: &[&[f32]],
    k: usize,
) -> Result<SearchResult> {
    let l = queries.len();
    if l == 0 {
        return Err(Error::arg("empty query sequence"));
    }
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let lists: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| Ok(segment_topk(index, q, k)?.into_iter().map(|h| h.index).collect()))
        .collect::<Result<_>>()?;
    let mut cands = within_tracks(db, &compensate_offsets(&lists), l);
    if cands.is_empty() {
        // No vote fits inside a track: slide each first-segment hit back
        // until the whole query fits in its track.
        for &idx in &lists[0] {
            let t = db.meta(idx).track_id;
            let start = db.track_start(t).unwrap_or(idx);
            let c = idx.saturating_sub(l - 1).max(start);
            if db.same_track_run(c, l) {
                cands.push(c);
            }
        }
        cands.sort_unstable();
        cands.dedup();
    }
    score_candidates(db, queries, &cands)
        .into_iter()
        .next()
        .ok_or_else(|| Error::arg(format!("no track holds {l} consecutive segments")))
}

/// One line of search output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    pub track_id: u32,
    pub track: String,
    pub db_start_index: usize,
    pub time_offset_seconds: f64,
    pub score: f32,
    pub per_segment_scores: Vec<f32>,
}

impl ResultRecord {
    pub fn new(query_id: &str, db: &FingerprintDb, r: &SearchResult) -> Self {
        Self {
            query_id: query_id.to_string(),
            track_id: r.track_id,
            track: db.track_name(r.track_id).unwrap_or_default().to_string(),
            db_start_index: r.db_start_index,
            time_offset_seconds: r.time_offset_seconds,
            score: r.score,
            per_segment_scores: r.per_segment_scores.clone(),
        }
    }
}

/// Audio-in, result-out search over a fingerprint db.
pub struct Searcher<'a> {
    pub encoder: &'a Encoder<f32>,
    pub extractor: &'a FeatureExtractor,
    pub db: &'a FingerprintDb,
    pub index: Option<&'a IvfPqIndex>,
    pub config: SearchConfig,
}

impl Searcher<'_> {
    fn backend(&self) -> SegmentIndex<'_> {
        match self.index {
            Some(ix) if !self.config.exhaustive => SegmentIndex::IvfPq(ix),
            _ => SegmentIndex::Exhaustive(self.db),
        }
    }

    /// Fingerprints of every 1 s segment at the frontend's hop.
    pub fn fingerprints(&self, clip: &AudioClip) -> Result<Vec<Fingerprint>> {
        let mels = self.extractor.segment_features(clip)?;
        self.encoder.fingerprint_batch(&mels)
    }

    pub fn search_fingerprints(&self, fps: &[Fingerprint]) -> Result<SearchResult> {
        let qs: Vec<&[f32]> = fps.iter().map(Fingerprint::as_slice).collect();
        search_sequence(self.db, self.backend(), &qs, self.config.k)
    }

    pub fn search(&self, clip: &AudioClip) -> Result<SearchResult> {
        let best = self.search_fingerprints(&self.fingerprints(clip)?)?;
        if !self.config.oversample {
            return Ok(best);
        }
        let hop = self.extractor.params().segment_hop_samples();
        let seg = self.extractor.params().segment_samples();
        let mut best = (f64::from(best.score) / best.per_segment_scores.len() as f64, best);
        for q in 1..4 {
            let shift = q * hop / 4;
            if clip.len() < shift + seg {
                break;
            }
            let sub = clip.slice(shift, clip.len() - shift)?;
            let r = self.search_fingerprints(&self.fingerprints(&sub)?)?;
            let mean = f64::from(r.score) / r.per_segment_scores.len() as f64;
            if mean > best.0 {
                best = (mean, r);
            }
        }
        Ok(best.1)
    }
}
