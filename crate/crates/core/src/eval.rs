//! Query synthesis from held-out audio and Top-1 hit-rate reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::augment::{stream_rng, AugmentParams, Augmentor, PoolSplit};
use crate::error::{Error, Result};
use crate::index::FingerprintDb;
use crate::search::Searcher;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub query_lengths: Vec<f32>,
    pub queries_per_length: usize,
    pub snr_db_min: f32,
    pub snr_db_max: f32,
    /// Near-match tolerance in segment indices.
    pub near_tolerance: usize,
    /// Crop queries on the segment-hop grid.
    pub grid_aligned: bool,
    /// Query `j` of every length starts at the same place in the same track,
    /// with the same degradation draws, so shorter queries are prefixes of
    /// longer ones.
    pub nested: bool,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            query_lengths: vec![1.0, 2.0, 3.0, 5.0, 6.0, 10.0],
            queries_per_length: 200,
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            near_tolerance: 1,
            grid_aligned: true,
            nested: true,
            seed: 0,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.query_lengths.is_empty() || self.query_lengths.iter().any(|&l| !(l >= 1.0)) {
            return Err(Error::arg("query lengths must be at least 1 s"));
        }
        if !(self.snr_db_min <= self.snr_db_max) {
            return Err(Error::arg("snr range must satisfy low <= high"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub length_secs: f32,
    pub clip: AudioClip,
    pub track_id: u32,
    pub start_sample: usize,
    /// Ground-truth segment ordinal within the track (nearest grid index).
    pub segment: usize,
    pub snr_db: Option<f64>,
    pub measured_snr_db: Option<f64>,
}

/// Crops queries from `tracks` (track `i` has id `i`) and runs them through
/// the augmentation chain without spectral masks. The augmentor must hold
/// test-split pools.
pub fn synthesize_queries(tracks: &[AudioClip], augmentor: &Augmentor, spec: &EvalSpec) -> Result<Vec<Query>> {
    augmentor.require_split(PoolSplit::Test)?;
    spec.validate()?;
    if tracks.is_empty() {
        return Err(Error::arg("no test tracks"));
    }
    let params = AugmentParams {
        snr_db_min: spec.snr_db_min,
        snr_db_max: spec.snr_db_max,
        ..augmentor.params().without_masks()
    };
    let chain = Augmentor::new(params, augmentor.pools().clone(), augmentor.extractor().clone())?;
    let fp = augmentor.extractor().params();
    let (sr, hop) = (fp.sample_rate as f32, fp.segment_hop_samples());
    let longest = spec.query_lengths.iter().fold(0.0f32, |m, &l| m.max(l));
    let longest_samples = (longest * sr).round() as usize;
    if let Some(t) = tracks.iter().position(|t| t.len() < longest_samples) {
        return Err(Error::arg(format!("track {t} is shorter than the longest query ({longest} s)")));
    }
    let mut out = Vec::new();
    for (li, &length) in spec.query_lengths.iter().enumerate() {
        let len = (length * sr).round() as usize;
        for j in 0..spec.queries_per_length {
            let stream = if spec.nested { j as u64 } else { ((li as u64) << 32) | j as u64 };
            let mut rng = stream_rng(spec.seed, stream);
            use rand::Rng;
            let track = rng.random_range(0..tracks.len());
            let span = tracks[track].len() - if spec.nested { longest_samples } else { len };
            let start = if spec.grid_aligned {
                rng.random_range(0..=span / hop) * hop
            } else {
                rng.random_range(0..=span)
            };
            let crop = tracks[track].slice(start, len)?;
            let degraded = chain.degrade(&crop, &mut rng)?;
            out.push(Query {
                id: format!("q{length}s_{j:05}"),
                length_secs: length,
                clip: degraded.clip,
                track_id: track as u32,
                start_sample: start,
                segment: (start as f64 / hop as f64).round() as usize,
                snr_db: degraded.snr_db,
                measured_snr_db: degraded.measured_snr_db,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    Exact,
    /// Within the given number of segment indices.
    Near(usize),
}

/// `100 * hits / total`; a missing prediction counts as a miss.
pub fn top1_hit_rate(pairs: &[(Option<usize>, usize)], mode: MatchMode) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let tol = match mode {
        MatchMode::Exact => 0,
        MatchMode::Near(t) => t,
    };
    let hits = pairs
        .iter()
        .filter(|(p, t)| p.is_some_and(|p| p.abs_diff(*t) <= tol))
        .count();
    100.0 * hits as f64 / pairs.len() as f64
}

/// Per-query outcome kept in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub length_secs: f32,
    pub truth_index: usize,
    pub truth_track: u32,
    pub predicted_index: Option<usize>,
    pub predicted_track: Option<u32>,
    pub score: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub length_secs: f32,
    pub queries: usize,
    pub exact: f64,
    pub near: f64,
    pub song: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Effective configuration the numbers were produced with.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub outcomes: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(config: serde_json::Value, outcomes: Vec<QueryOutcome>, near_tolerance: usize) -> Self {
        let mut lengths: Vec<f32> = outcomes.iter().map(|o| o.length_secs).collect();
        lengths.sort_by(f32::total_cmp);
        lengths.dedup();
        let rows = lengths
            .into_iter()
            .map(|length_secs| {
                let sel: Vec<&QueryOutcome> = outcomes.iter().filter(|o| o.length_secs == length_secs).collect();
                let pairs: Vec<(Option<usize>, usize)> = sel.iter().map(|o| (o.predicted_index, o.truth_index)).collect();
                let songs = sel.iter().filter(|o| o.predicted_track == Some(o.truth_track)).count();
                ReportRow {
                    length_secs,
                    queries: sel.len(),
                    exact: top1_hit_rate(&pairs, MatchMode::Exact),
                    near: top1_hit_rate(&pairs, MatchMode::Near(near_tolerance)),
                    song: 100.0 * songs as f64 / sel.len().max(1) as f64,
                }
            })
            .collect();
        Self { config, rows, outcomes }
    }

    pub fn row(&self, length_secs: f32) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.length_secs == length_secs)
    }

    /// Plain-text grid: one column per query length.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "length (s)");
        for r in &self.rows {
            let _ = write!(s, "{:>8}", r.length_secs);
        }
        s.push('\n');
        for (name, f) in [
            ("exact (%)", (|r: &ReportRow| r.exact) as fn(&ReportRow) -> f64),
            ("near (%)", |r| r.near),
            ("song (%)", |r| r.song),
        ] {
            let _ = write!(s, "{name:<12}");
            for r in &self.rows {
                let _ = write!(s, "{:>8.1}", f(r));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<12}", "queries");
        for r in &self.rows {
            let _ = write!(s, "{:>8}", r.queries);
        }
        s.push('\n');
        let _ = writeln!(s, "config: {}", self.config);
        s
    }
}

/// Searches every query and scores the predictions against ground truth.
pub fn evaluate(
    searcher: &Searcher<'_>,
    db: &FingerprintDb,
    queries: &[Query],
    near_tolerance: usize,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut outcomes = Vec::with_capacity(queries.len());
    for q in queries {
        let start = db
            .track_start(q.track_id)
            .ok_or_else(|| Error::arg(format!("query track {} is not in the database", q.track_id)))?;
        let truth_index = start + q.segment;
        let result = searcher.search(&q.clip);
        if let Err(e) = &result {
            log::warn!("query {} failed: {e}", q.id);
        }
        let r = result.ok();
        outcomes.push(QueryOutcome {
            query_id: q.id.clone(),
            length_secs: q.length_secs,
            truth_index,
            truth_track: q.track_id,
            predicted_index: r.as_ref().map(|r| r.db_start_index),
            predicted_track: r.as_ref().map(|r| r.track_id),
            score: r.as_ref().map(|r| r.score),
        });
    }
    Ok(EvalReport::from_outcomes(config, outcomes, near_tolerance))
}
