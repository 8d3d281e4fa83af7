use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::Fingerprint;
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader, ByteWriter};

pub const DB_MAGIC: &[u8; 8] = b"NAFPDB01";

/// Segment hop that turns an ordinal into a start time.
const HOP_SECS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentMeta {
    pub track_id: u32,
    /// Position of the segment within its track, in hops.
    pub segment: u32,
}

/// Unit-norm segment fingerprints stored track by track, so that the
/// segments of a track occupy consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDb {
    d: usize,
    vectors: Vec<f32>,
    meta: Vec<SegmentMeta>,
    tracks: Vec<String>,
}

/// Path of the track-name sidecar written next to a db file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".tracks");
    PathBuf::from(s)
}

impl FingerprintDb {
    pub fn new(d: usize) -> Self {
        Self { d, vectors: Vec::new(), meta: Vec::new(), tracks: Vec::new() }
    }

    /// Appends a whole track; returns its id.
    pub fn add_track(&mut self, name: &str, fingerprints: &[Fingerprint]) -> Result<u32> {
        if name.contains(['\t', '\n', '\r']) {
            return Err(Error::arg(format!("track name {name:?} contains a tab or newline")));
        }
        if let Some(fp) = fingerprints.iter().find(|f| f.dim() != self.d) {
            return Err(Error::shape(format!("fingerprint of dimension {}, database is {}", fp.dim(), self.d)));
        }
        let id = u32::try_from(self.tracks.len()).map_err(|_| Error::arg("too many tracks"))?;
        for (i, fp) in fingerprints.iter().enumerate() {
            self.vectors.extend_from_slice(fp.as_slice());
            self.meta.push(SegmentMeta { track_id: id, segment: i as u32 });
        }
        self.tracks.push(name.to_string());
        Ok(id)
    }

    /// Builds a db from raw rows; rows of one track must be contiguous with
    /// ordinals counting up from zero.
    pub fn from_parts(d: usize, vectors: Vec<f32>, meta: Vec<SegmentMeta>, tracks: Vec<String>) -> Result<Self> {
        let db = Self { d, vectors, meta, tracks };
        db.validate().map_err(Error::arg)?;
        Ok(db)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.d == 0 {
            return Err("dimension must be positive".into());
        }
        if self.vectors.len() != self.meta.len() * self.d {
            return Err(format!("{} vectors but {} meta entries", self.vectors.len() / self.d, self.meta.len()));
        }
        if let Some(v) = self.vectors.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite vector component {v}"));
        }
        let mut prev: Option<SegmentMeta> = None;
        for m in &self.meta {
            if m.track_id as usize >= self.tracks.len() {
                return Err(format!("track id {} has no name", m.track_id));
            }
            let ok = match prev {
                Some(p) if p.track_id == m.track_id => m.segment == p.segment + 1,
                Some(p) => m.track_id > p.track_id && m.segment == 0,
                None => m.segment == 0,
            };
            if !ok {
                return Err(format!("segment {} of track {} is out of order", m.segment, m.track_id));
            }
            prev = Some(*m);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn meta(&self, i: usize) -> SegmentMeta {
        self.meta[i]
    }

    pub fn metas(&self) -> &[SegmentMeta] {
        &self.meta
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }

    pub fn track_name(&self, id: u32) -> Option<&str> {
        self.tracks.get(id as usize).map(String::as_str)
    }

    pub fn start_secs(&self, i: usize) -> f64 {
        f64::from(self.meta[i].segment) * HOP_SECS
    }

    /// Whether rows `start .. start + len` all belong to one track.
    pub fn same_track_run(&self, start: usize, len: usize) -> bool {
        len > 0 && start + len <= self.len() && self.meta[start].track_id == self.meta[start + len - 1].track_id
    }

    /// Row of the first segment of `track_id`, if it has any.
    pub fn track_start(&self, track_id: u32) -> Option<usize> {
        let i = self.meta.partition_point(|m| m.track_id < track_id);
        (i < self.len() && self.meta[i].track_id == track_id).then_some(i)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(DB_MAGIC);
        w.u32(self.d as u32);
        w.u64(self.len() as u64);
        w.f32s(&self.vectors);
        for m in &self.meta {
            w.u32(m.track_id);
            w.u32(m.segment);
        }
        w.buf
    }

    fn sidecar_text(&self) -> String {
        let mut s = String::new();
        for (id, name) in self.tracks.iter().enumerate() {
            let _ = writeln!(s, "{id}\t{name}");
        }
        s
    }

    /// Writes the db and its `.tracks` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(&sidecar_path(path), self.sidecar_text().as_bytes())?;
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], sidecar: &str, path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(DB_MAGIC)?;
        let d = r.u32("dimension")? as usize;
        let count = usize::try_from(r.u64("count")?).map_err(|_| r.format_err("count overflows"))?;
        let expected = count
            .checked_mul(d * 4 + 8)
            .ok_or_else(|| r.format_err("count overflows"))?;
        if bytes.len() - 20 < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                msg: format!("{count} entries need {expected} payload bytes, file has {}", bytes.len() - 20),
            });
        }
        let vectors = r.f32s(count * d, "vectors")?;
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            meta.push(SegmentMeta { track_id: r.u32("track id")?, segment: r.u32("segment")? });
        }
        r.finish()?;
        let mut tracks = Vec::new();
        for (line_no, line) in sidecar.lines().enumerate() {
            let bad = || Error::Format {
                path: sidecar_path(path),
                msg: format!("line {}: expected `id<TAB>name`", line_no + 1),
            };
            let (id, name) = line.split_once('\t').ok_or_else(bad)?;
            if id.parse::<usize>().map_err(|_| bad())? != tracks.len() {
                return Err(bad());
            }
            tracks.push(name.to_string());
        }
        let db = Self { d, vectors, meta, tracks };
        db.validate().map_err(|msg| Error::Format { path: path.to_path_buf(), msg })?;
        Ok(db)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let sidecar = fs::read_to_string(sidecar_path(path))?;
        Self::from_bytes(&bytes, &sidecar, path)
    }
}
