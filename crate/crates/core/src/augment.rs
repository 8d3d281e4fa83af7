//! Replica synthesis: time offset, background noise, impulse responses and
//! batch-wise spectral masking.
//!
//! Waveform stages run in a fixed order on the replica only: offset crop,
//! background mix, microphone IR, room IR. Spectral masks are drawn once per
//! batch and applied to every example, originals included.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{mean_square, read_wav, resample, AudioClip, CANONICAL_RATE};
use crate::error::{Error, Result};
use crate::frontend::{FeatureExtractor, MelSpectrogram};

/// Which side of the train/test split a noise or IR pool belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSplit {
    Train,
    Test,
}

impl PoolSplit {
    /// Split tag from a directory name suffix, `noise.train` or `ir_room.test`.
    pub fn from_dir_name(name: &str) -> Option<Self> {
        if name.ends_with(".train") {
            Some(PoolSplit::Train)
        } else if name.ends_with(".test") {
            Some(PoolSplit::Test)
        } else {
            None
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            PoolSplit::Train => ".train",
            PoolSplit::Test => ".test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrOrder {
    MicThenRoom,
    RoomThenMic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Maximum relative time shift between original and replica.
    pub offset_max_secs: f32,
    pub snr_db_min: f32,
    pub snr_db_max: f32,
    pub mask_frac_min: f32,
    pub mask_frac_max: f32,
    pub background: bool,
    pub mic_ir: bool,
    pub room_ir: bool,
    pub ir_order: IrOrder,
    pub cutout: bool,
    pub time_stripe: bool,
    pub freq_stripe: bool,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            offset_max_secs: 0.2,
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            mask_frac_min: 0.1,
            mask_frac_max: 0.5,
            background: true,
            mic_ir: true,
            room_ir: true,
            ir_order: IrOrder::MicThenRoom,
            cutout: true,
            time_stripe: true,
            freq_stripe: true,
            seed: 0,
        }
    }
}

impl AugmentParams {
    /// Every augmentor off: the replica is a plain offset crop.
    pub fn disabled() -> Self {
        Self {
            background: false,
            mic_ir: false,
            room_ir: false,
            cutout: false,
            time_stripe: false,
            freq_stripe: false,
            ..Self::default()
        }
    }

    /// Same chain without spectral masks, as used for query synthesis.
    pub fn without_masks(&self) -> Self {
        Self {
            cutout: false,
            time_stripe: false,
            freq_stripe: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset_max_secs >= 0.0) {
            return Err(Error::arg("offset_max_secs must be >= 0"));
        }
        if !(self.snr_db_min <= self.snr_db_max) {
            return Err(Error::arg("snr range must satisfy low <= high"));
        }
        if !(self.mask_frac_min > 0.0
            && self.mask_frac_min <= self.mask_frac_max
            && self.mask_frac_max <= 1.0)
        {
            return Err(Error::arg("mask fractions must satisfy 0 < low <= high <= 1"));
        }
        Ok(())
    }

    pub fn any_mask(&self) -> bool {
        self.cutout || self.time_stripe || self.freq_stripe
    }
}

/// Noise clips and impulse responses for one side of the split.
#[derive(Debug, Clone)]
pub struct AugmentPools {
    split: PoolSplit,
    noise: Vec<AudioClip>,
    mic_irs: Vec<Vec<f32>>,
    room_irs: Vec<Vec<f32>>,
}

impl AugmentPools {
    pub fn new(
        split: PoolSplit,
        noise: Vec<AudioClip>,
        mic_irs: Vec<Vec<f32>>,
        room_irs: Vec<Vec<f32>>,
    ) -> Result<Self> {
        for ir in mic_irs.iter().chain(&room_irs) {
            check_ir(ir)?;
        }
        if let Some(c) = noise.iter().find(|c| c.power() == 0.0) {
            return Err(Error::InvalidAudio(format!(
                "silent noise clip ({} samples) in pool",
                c.len()
            )));
        }
        Ok(Self {
            split,
            noise,
            mic_irs,
            room_irs,
        })
    }

    pub fn empty(split: PoolSplit) -> Self {
        Self {
            split,
            noise: Vec::new(),
            mic_irs: Vec::new(),
            room_irs: Vec::new(),
        }
    }

    /// Loads WAV pools from three directories whose names carry the same
    /// `.train` / `.test` suffix. Everything is resampled to 8 kHz.
    pub fn load(noise_dir: &Path, mic_dir: &Path, room_dir: &Path) -> Result<Self> {
        let mut split = None;
        for dir in [noise_dir, mic_dir, room_dir] {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let s = PoolSplit::from_dir_name(&name).ok_or_else(|| {
                Error::SplitViolation(format!(
                    "pool directory {} has no .train/.test suffix",
                    dir.display()
                ))
            })?;
            if split.is_some_and(|prev| prev != s) {
                return Err(Error::SplitViolation(format!(
                    "pool directory {} does not match the split of the others",
                    dir.display()
                )));
            }
            split = Some(s);
        }
        let noise = load_wav_dir(noise_dir)?;
        let mic = load_wav_dir(mic_dir)?
            .into_iter()
            .map(AudioClip::into_samples)
            .collect();
        let room = load_wav_dir(room_dir)?
            .into_iter()
            .map(AudioClip::into_samples)
            .collect();
        Self::new(split.unwrap(), noise, mic, room)
    }

    pub fn split(&self) -> PoolSplit {
        self.split
    }

    pub fn noise(&self) -> &[AudioClip] {
        &self.noise
    }

    pub fn mic_irs(&self) -> &[Vec<f32>] {
        &self.mic_irs
    }

    pub fn room_irs(&self) -> &[Vec<f32>] {
        &self.room_irs
    }
}

/// Sorted WAV files of a directory, resampled to the canonical rate.
pub fn load_wav_dir(dir: &Path) -> Result<Vec<AudioClip>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| resample(&read_wav(p)?, CANONICAL_RATE))
        .collect()
}

fn check_ir(ir: &[f32]) -> Result<()> {
    if ir.is_empty() {
        return Err(Error::arg("impulse response is empty"));
    }
    if ir.iter().all(|&v| v == 0.0) {
        return Err(Error::arg("impulse response is all zeros"));
    }
    if ir.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("impulse response has non-finite taps"));
    }
    Ok(())
}

/// An original/replica crop pair drawn from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub org: AudioClip,
    pub rep: AudioClip,
    pub org_start: usize,
    pub rep_start: usize,
}

/// Crops `seg_len` samples at the two given starts.
pub fn offset_pair(
    source: &AudioClip,
    seg_len: usize,
    org_start: usize,
    rep_start: usize,
) -> Result<SegmentPair> {
    Ok(SegmentPair {
        org: source.slice(org_start, seg_len)?,
        rep: source.slice(rep_start, seg_len)?,
        org_start,
        rep_start,
    })
}

/// Draws independent uniform crop starts for original and replica from a
/// source of exactly `seg_len + max_offset` samples.
pub fn random_offset_pair<R: Rng + ?Sized>(
    source: &AudioClip,
    seg_len: usize,
    max_offset: usize,
    rng: &mut R,
) -> Result<SegmentPair> {
    if source.len() != seg_len + max_offset {
        return Err(Error::InvalidAudio(format!(
            "offset source must have {} samples, got {}",
            seg_len + max_offset,
            source.len()
        )));
    }
    let a = rng.random_range(0..=max_offset);
    let b = rng.random_range(0..=max_offset);
    offset_pair(source, seg_len, a, b)
}

/// Gain that brings `noise` to `snr_db` below `signal`.
pub fn background_gain(p_signal: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// A mixed signal and what went into it.
#[derive(Debug, Clone)]
pub struct Mixed {
    pub clip: AudioClip,
    pub gain: f64,
    /// `10 log10(P_signal / P_scaled_noise)` measured on the actual samples.
    pub measured_snr_db: f64,
}

/// Adds `noise` (already cropped to the signal length) at the requested SNR.
pub fn mix_background_crop(signal: &AudioClip, noise: &[f32], snr_db: f64) -> Result<Mixed> {
    if noise.len() != signal.len() {
        return Err(Error::shape(format!(
            "noise crop of {} samples for a {} sample signal",
            noise.len(),
            signal.len()
        )));
    }
    let p_sig = signal.power();
    let p_noise = mean_square(noise);
    if p_sig == 0.0 {
        return Err(Error::InvalidAudio("SNR undefined for a silent signal".into()));
    }
    if p_noise == 0.0 {
        return Err(Error::InvalidAudio("SNR undefined for silent noise".into()));
    }
    let gain = background_gain(p_sig, p_noise, snr_db);
    let scaled: Vec<f32> = noise.iter().map(|&n| (f64::from(n) * gain) as f32).collect();
    let measured_snr_db = 10.0 * (p_sig / mean_square(&scaled)).log10();
    let samples = signal
        .samples()
        .iter()
        .zip(&scaled)
        .map(|(&s, &n)| s + n)
        .collect();
    Ok(Mixed {
        clip: AudioClip::new(samples, signal.sample_rate())?,
        gain,
        measured_snr_db,
    })
}

/// Adds a random window of `noise` at `snr_db`.
pub fn mix_background<R: Rng + ?Sized>(
    signal: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixed> {
    if noise.len() < signal.len() {
        return Err(Error::InvalidAudio(format!(
            "noise clip of {} samples is shorter than the {} sample signal",
            noise.len(),
            signal.len()
        )));
    }
    let start = rng.random_range(0..=noise.len() - signal.len());
    mix_background_crop(signal, &noise.samples()[start..start + signal.len()], snr_db)
}

/// Above this many multiply-adds the convolution switches to FFT.
const DIRECT_CONV_LIMIT: usize = 1 << 22;

/// Linear convolution truncated to the signal length, rescaled so the output
/// peak equals the input peak.
pub fn apply_ir(signal: &AudioClip, ir: &[f32]) -> Result<AudioClip> {
    check_ir(ir)?;
    // Trailing zero taps contribute nothing.
    let taps = ir.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
    let ir = &ir[..taps];
    let x = signal.samples();
    let mut y = if x.len().saturating_mul(ir.len()) <= DIRECT_CONV_LIMIT {
        convolve_direct(x, ir)
    } else {
        convolve_fft(x, ir)
    };
    let in_peak = signal.peak();
    let out_peak = y.iter().fold(0f32, |m, v| m.max(v.abs()));
    if out_peak > 0.0 {
        let g = in_peak / out_peak;
        y.iter_mut().for_each(|v| *v *= g);
    }
    AudioClip::new(y, signal.sample_rate())
}

/// `y[n] = sum_k x[n-k] h[k]` for `n < x.len()`.
fn convolve_direct(x: &[f32], h: &[f32]) -> Vec<f32> {
    (0..x.len())
        .map(|n| {
            let kmax = h.len().min(n + 1);
            (0..kmax)
                .map(|k| f64::from(x[n - k]) * f64::from(h[k]))
                .sum::<f64>() as f32
        })
        .collect()
}

fn convolve_fft(x: &[f32], h: &[f32]) -> Vec<f32> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let to_complex = |v: &[f32]| {
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (b, &s) in buf.iter_mut().zip(v) {
            b.re = f64::from(s);
        }
        buf
    };
    let mut xf = to_complex(x);
    let mut hf = to_complex(h);
    fwd.process(&mut xf);
    fwd.process(&mut hf);
    for (a, b) in xf.iter_mut().zip(&hf) {
        *a *= b;
    }
    inv.process(&mut xf);
    let scale = 1.0 / n as f64;
    xf[..x.len()].iter().map(|c| (c.re * scale) as f32).collect()
}

/// One rectangle of masked cells; `[f0, f0+f_len) x [t0, t0+t_len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRegion {
    pub f0: usize,
    pub f_len: usize,
    pub t0: usize,
    pub t_len: usize,
}

impl MaskRegion {
    fn contains(&self, f: usize, t: usize) -> bool {
        f >= self.f0 && f < self.f0 + self.f_len && t >= self.t0 && t < self.t0 + self.t_len
    }
}

/// Extent for a mask fraction: `max(1, round(frac * axis_len))`, capped at the axis.
pub fn mask_extent(frac: f32, axis_len: usize) -> usize {
    ((frac * axis_len as f32).round() as usize).clamp(1, axis_len)
}

/// Cutout rectangle plus time and frequency stripes, shared by a whole batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecMask {
    pub mel_bins: usize,
    pub frames: usize,
    pub regions: Vec<MaskRegion>,
}

impl SpecMask {
    pub fn sample<R: Rng + ?Sized>(
        mel_bins: usize,
        frames: usize,
        params: &AugmentParams,
        rng: &mut R,
    ) -> Self {
        let frac = |rng: &mut R| rng.random_range(params.mask_frac_min..=params.mask_frac_max);
        let mut regions = Vec::new();
        if params.cutout {
            let f_len = mask_extent(frac(rng), mel_bins);
            let t_len = mask_extent(frac(rng), frames);
            regions.push(MaskRegion {
                f0: rng.random_range(0..=mel_bins - f_len),
                f_len,
                t0: rng.random_range(0..=frames - t_len),
                t_len,
            });
        }
        if params.time_stripe {
            let t_len = mask_extent(frac(rng), frames);
            regions.push(MaskRegion {
                f0: 0,
                f_len: mel_bins,
                t0: rng.random_range(0..=frames - t_len),
                t_len,
            });
        }
        if params.freq_stripe {
            let f_len = mask_extent(frac(rng), mel_bins);
            regions.push(MaskRegion {
                f0: rng.random_range(0..=mel_bins - f_len),
                f_len,
                t0: 0,
                t_len: frames,
            });
        }
        Self {
            mel_bins,
            frames,
            regions,
        }
    }

    pub fn contains(&self, f: usize, t: usize) -> bool {
        self.regions.iter().any(|r| r.contains(f, t))
    }

    /// Sets every masked cell of every spectrogram to the batch minimum.
    pub fn apply(&self, batch: &mut [MelSpectrogram]) {
        if self.regions.is_empty() {
            return;
        }
        let fill = batch
            .iter()
            .map(MelSpectrogram::min)
            .fold(f32::INFINITY, f32::min);
        for s in batch.iter_mut() {
            let frames = s.frames();
            let values = s.values_mut();
            for r in &self.regions {
                for f in r.f0..r.f0 + r.f_len {
                    values[f * frames + r.t0..f * frames + r.t0 + r.t_len].fill(fill);
                }
            }
        }
    }
}

/// Draws one mask and applies it to the whole batch.
pub fn spec_mask_batch<R: Rng + ?Sized>(
    batch: &mut [MelSpectrogram],
    params: &AugmentParams,
    rng: &mut R,
) -> Result<SpecMask> {
    let first = batch
        .first()
        .ok_or_else(|| Error::arg("cannot mask an empty batch"))?;
    let (bins, frames) = (first.mel_bins(), first.frames());
    if batch
        .iter()
        .any(|s| s.mel_bins() != bins || s.frames() != frames)
    {
        return Err(Error::shape("spectrograms in a batch must share a shape"));
    }
    let mask = SpecMask::sample(bins, frames, params, rng);
    mask.apply(batch);
    Ok(mask)
}

/// Independent RNG stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A degraded waveform with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct Degraded {
    pub clip: AudioClip,
    pub snr_db: Option<f64>,
    pub measured_snr_db: Option<f64>,
}

/// The full augmentation chain bound to a feature frontend and a pool split.
#[derive(Debug, Clone)]
pub struct Augmentor {
    params: AugmentParams,
    pools: AugmentPools,
    extractor: FeatureExtractor,
}

impl Augmentor {
    pub fn new(
        params: AugmentParams,
        pools: AugmentPools,
        extractor: FeatureExtractor,
    ) -> Result<Self> {
        params.validate()?;
        if params.background && pools.noise.is_empty() {
            return Err(Error::arg("background mixing enabled but the noise pool is empty"));
        }
        if params.mic_ir && pools.mic_irs.is_empty() {
            return Err(Error::arg("mic IR enabled but the mic IR pool is empty"));
        }
        if params.room_ir && pools.room_irs.is_empty() {
            return Err(Error::arg("room IR enabled but the room IR pool is empty"));
        }
        Ok(Self {
            params,
            pools,
            extractor,
        })
    }

    pub fn params(&self) -> &AugmentParams {
        &self.params
    }

    pub fn pools(&self) -> &AugmentPools {
        &self.pools
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn split(&self) -> PoolSplit {
        self.pools.split
    }

    /// Fails unless the pools belong to `expected`.
    pub fn require_split(&self, expected: PoolSplit) -> Result<()> {
        if self.pools.split != expected {
            return Err(Error::SplitViolation(format!(
                "augmentor holds {:?} pools, {expected:?} required",
                self.pools.split
            )));
        }
        Ok(())
    }

    pub fn offset_max_samples(&self) -> usize {
        (f64::from(self.params.offset_max_secs) * f64::from(self.extractor.params().sample_rate))
            .round() as usize
    }

    /// Length of a training source: one segment plus the offset range.
    pub fn source_samples(&self) -> usize {
        self.extractor.params().segment_samples() + self.offset_max_samples()
    }

    /// Replica-only waveform stages: background mix, then the two IRs.
    /// A silent signal skips mixing since its SNR is undefined.
    pub fn degrade<R: Rng + ?Sized>(&self, signal: &AudioClip, rng: &mut R) -> Result<Degraded> {
        let p = &self.params;
        let mut clip = signal.clone();
        let (mut snr_db, mut measured) = (None, None);
        if p.background && signal.power() > 0.0 {
            let noise = &self.pools.noise[rng.random_range(0..self.pools.noise.len())];
            let snr = rng.random_range(p.snr_db_min..=p.snr_db_max);
            let mixed = mix_background(&clip, noise, f64::from(snr), rng)?;
            snr_db = Some(f64::from(snr));
            measured = Some(mixed.measured_snr_db);
            clip = mixed.clip;
        }
        let mut stages = [(p.mic_ir, &self.pools.mic_irs), (p.room_ir, &self.pools.room_irs)];
        if p.ir_order == IrOrder::RoomThenMic {
            stages.reverse();
        }
        for (enabled, pool) in stages {
            if enabled {
                let ir = &pool[rng.random_range(0..pool.len())];
                clip = apply_ir(&clip, ir)?;
            }
        }
        Ok(Degraded {
            clip,
            snr_db,
            measured_snr_db: measured,
        })
    }

    /// Original and replica features for one source, before masking.
    pub fn pair_features<R: Rng + ?Sized>(
        &self,
        source: &AudioClip,
        rng: &mut R,
    ) -> Result<(MelSpectrogram, MelSpectrogram)> {
        let seg = self.extractor.params().segment_samples();
        let pair = random_offset_pair(source, seg, self.offset_max_samples(), rng)?;
        let rep = self.degrade(&pair.rep, rng)?.clip;
        Ok((
            self.extractor.mel_spectrogram(&pair.org)?,
            self.extractor.mel_spectrogram(&rep)?,
        ))
    }

    /// Builds an interleaved `[org_1, rep_1, org_2, rep_2, ...]` batch. Source
    /// `k` uses RNG stream `streams[k]` under the configured seed, and the
    /// batch mask uses `mask_stream`, so any batch can be rebuilt exactly.
    pub fn batch(
        &self,
        sources: &[&AudioClip],
        streams: &[u64],
        mask_stream: u64,
    ) -> Result<Vec<MelSpectrogram>> {
        if sources.len() != streams.len() {
            return Err(Error::arg("one rng stream per source required"));
        }
        let mut out = Vec::with_capacity(2 * sources.len());
        for (src, &stream) in sources.iter().zip(streams) {
            let mut rng = stream_rng(self.params.seed, stream);
            let (org, rep) = self.pair_features(src, &mut rng)?;
            out.push(org);
            out.push(rep);
        }
        if self.params.any_mask() {
            let mut rng = stream_rng(self.params.seed, mask_stream);
            spec_mask_batch(&mut out, &self.params, &mut rng)?;
        }
        Ok(out)
    }

    /// One source through the whole chain, masked as a batch of two.
    pub fn chain<R: Rng + ?Sized>(
        &self,
        source: &AudioClip,
        rng: &mut R,
    ) -> Result<(MelSpectrogram, MelSpectrogram)> {
        let (org, rep) = self.pair_features(source, rng)?;
        let mut batch = [org, rep];
        if self.params.any_mask() {
            spec_mask_batch(&mut batch, &self.params, rng)?;
        }
        let [org, rep] = batch;
        Ok((org, rep))
    }
}
