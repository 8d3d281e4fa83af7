//! Log-power Mel spectrogram frontend.
//!
//! A 1 s, 8 kHz segment becomes a 256 x 32 matrix: centered STFT (1024-point
//! periodic Hann window, hop 256, reflection padding), the Nyquist bin dropped
//! to keep 512 bins, a 256-band triangular Mel filterbank over 300..4000 Hz
//! applied to power, then dB scaling clamped to an 80 dB dynamic range below
//! the segment maximum.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Floor applied to Mel power before taking the logarithm.
pub const LOG_FLOOR: f32 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub sample_rate: u32,
    pub stft_window: usize,
    pub stft_hop: usize,
    pub fft_bins_kept: usize,
    pub mel_bins: usize,
    pub freq_min: f32,
    pub freq_max: f32,
    pub dynamic_range_db: f32,
    pub segment_secs: f32,
    pub segment_hop_secs: f32,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            stft_window: 1024,
            stft_hop: 256,
            fft_bins_kept: 512,
            mel_bins: 256,
            freq_min: 300.0,
            freq_max: 4000.0,
            dynamic_range_db: 80.0,
            segment_secs: 1.0,
            segment_hop_secs: 0.5,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.stft_window == 0 || self.stft_hop == 0 {
            return Err(Error::arg("sample rate, window and hop must be positive"));
        }
        if self.fft_bins_kept == 0 || self.fft_bins_kept > self.stft_window / 2 + 1 {
            return Err(Error::arg(format!(
                "fft_bins_kept {} outside 1..={}",
                self.fft_bins_kept,
                self.stft_window / 2 + 1
            )));
        }
        if !(self.freq_min >= 0.0
            && self.freq_min < self.freq_max
            && self.freq_max <= self.sample_rate as f32 / 2.0)
        {
            return Err(Error::arg(format!(
                "need 0 <= freq_min < freq_max <= sample_rate/2, got [{}, {}] at {} Hz",
                self.freq_min, self.freq_max, self.sample_rate
            )));
        }
        if self.mel_bins == 0 || self.dynamic_range_db <= 0.0 {
            return Err(Error::arg("mel_bins and dynamic_range_db must be positive"));
        }
        if self.segment_secs <= 0.0 || self.segment_hop_secs <= 0.0 {
            return Err(Error::arg("segment length and hop must be positive"));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (f64::from(self.segment_secs) * f64::from(self.sample_rate)).round() as usize
    }

    pub fn segment_hop_samples(&self) -> usize {
        (f64::from(self.segment_hop_secs) * f64::from(self.sample_rate)).round() as usize
    }

    /// STFT frame count for a clip of `len` samples (centered framing).
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.stft_hop + 1
    }

    /// Frames per segment (32 with the defaults).
    pub fn segment_frames(&self) -> usize {
        self.frames_for(self.segment_samples())
    }
}

/// A row-major `rows x cols` matrix; rows are frequency, columns time.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Spectrogram {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }
}

/// Log-power Mel features of one segment, `mel_bins x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    mel_bins: usize,
    frames: usize,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f32>, mel_bins: usize, frames: usize) -> Result<Self> {
        if values.len() != mel_bins * frames {
            return Err(Error::shape(format!(
                "{} values for a {mel_bins}x{frames} spectrogram",
                values.len()
            )));
        }
        Ok(Self {
            values,
            mel_bins,
            frames,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn mel_bins(&self) -> usize {
        self.mel_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, edges uniform on the Mel scale, each scaled to unit
/// area in Hz (weights `2 / (f_hi - f_lo)` at the apex).
fn mel_filterbank(p: &FeatureParams) -> Vec<f32> {
    let n_fft = p.stft_window;
    let bins = p.fft_bins_kept;
    let lo = hz_to_mel(f64::from(p.freq_min));
    let hi = hz_to_mel(f64::from(p.freq_max));
    let edges: Vec<f64> = (0..p.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (p.mel_bins + 1) as f64))
        .collect();
    let bin_hz = f64::from(p.sample_rate) / n_fft as f64;
    let mut weights = vec![0f32; p.mel_bins * bins];
    for m in 0..p.mel_bins {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            weights[m * bins + k] = (w * norm) as f32;
        }
    }
    weights
}

/// Reusable frontend: FFT plan, analysis window and filterbank are built once.
/// Shareable across threads.
#[derive(Clone)]
pub struct FeatureExtractor {
    params: FeatureParams,
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filterbank: Vec<f32>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl FeatureExtractor {
    pub fn new(params: FeatureParams) -> Result<Self> {
        params.validate()?;
        let n = params.stft_window;
        let fft = FftPlanner::new().plan_fft_forward(n);
        // Periodic Hann.
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let filterbank = mel_filterbank(&params);
        Ok(Self {
            params,
            fft,
            window,
            filterbank,
        })
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn filterbank(&self) -> &[f32] {
        &self.filterbank
    }

    /// Centered STFT magnitude, `fft_bins_kept x frames`.
    pub fn stft_magnitude(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let p = &self.params;
        if clip.sample_rate() != p.sample_rate {
            return Err(Error::InvalidAudio(format!(
                "clip at {} Hz, frontend expects {} Hz",
                clip.sample_rate(),
                p.sample_rate
            )));
        }
        let x = clip.samples();
        if x.len() < p.stft_hop {
            return Err(Error::InvalidAudio(format!(
                "clip of {} samples is shorter than one hop ({})",
                x.len(),
                p.stft_hop
            )));
        }
        let n = p.stft_window;
        let pad = n / 2;
        let frames = p.frames_for(x.len());
        let bins = p.fft_bins_kept;
        let mut out = vec![0f32; bins * frames];
        let mut buf = vec![Complex::new(0f32, 0f32); n];
        let mut scratch = vec![Complex::new(0f32, 0f32); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * p.stft_hop) as isize - pad as isize;
            for (i, c) in buf.iter_mut().enumerate() {
                let idx = reflect_index(start + i as isize, x.len());
                *c = Complex::new(x[idx] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                out[k * frames + t] = buf[k].norm();
            }
        }
        Ok(Spectrogram {
            rows: bins,
            cols: frames,
            values: out,
        })
    }

    /// Mel filterbank on power, dB scaling and dynamic-range clamp.
    pub fn log_power_mel(&self, mag: &Spectrogram) -> Result<MelSpectrogram> {
        let p = &self.params;
        if mag.rows != p.fft_bins_kept || mag.values.len() != mag.rows * mag.cols {
            return Err(Error::shape(format!(
                "magnitude has {} rows, frontend expects {}",
                mag.rows, p.fft_bins_kept
            )));
        }
        let frames = mag.cols;
        let power: Vec<f32> = mag.values.iter().map(|m| m * m).collect();
        let mut mel = vec![0f32; p.mel_bins * frames];
        // mel[mel_bins x frames] = filterbank[mel_bins x bins] * power[bins x frames]
        unsafe {
            matrixmultiply::sgemm(
                p.mel_bins,
                p.fft_bins_kept,
                frames,
                1.0,
                self.filterbank.as_ptr(),
                p.fft_bins_kept as isize,
                1,
                power.as_ptr(),
                frames as isize,
                1,
                0.0,
                mel.as_mut_ptr(),
                frames as isize,
                1,
            );
        }
        let mut max = f32::NEG_INFINITY;
        for v in mel.iter_mut() {
            *v = 10.0 * v.max(LOG_FLOOR).log10();
            max = max.max(*v);
        }
        let floor = max - p.dynamic_range_db;
        for v in mel.iter_mut() {
            *v = v.max(floor);
        }
        MelSpectrogram::new(mel, p.mel_bins, frames)
    }

    pub fn mel_spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        self.log_power_mel(&self.stft_magnitude(clip)?)
    }

    /// Features of every segment of a clip, in stream order.
    pub fn segment_features(&self, clip: &AudioClip) -> Result<Vec<MelSpectrogram>> {
        segment_stream(clip, &self.params)?
            .iter()
            .map(|s| self.mel_spectrogram(s))
            .collect()
    }
}

/// Mirror index into `[0, len)` without repeating the edge sample.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

pub fn stft_magnitude(clip: &AudioClip, params: &FeatureParams) -> Result<Spectrogram> {
    FeatureExtractor::new(params.clone())?.stft_magnitude(clip)
}

pub fn log_power_mel(mag: &Spectrogram, params: &FeatureParams) -> Result<MelSpectrogram> {
    FeatureExtractor::new(params.clone())?.log_power_mel(mag)
}

/// Start sample of every segment of a clip of `len` samples.
pub fn segment_starts(len: usize, params: &FeatureParams) -> Vec<usize> {
    let seg = params.segment_samples();
    let hop = params.segment_hop_samples();
    if len < seg || hop == 0 {
        return Vec::new();
    }
    (0..=(len - seg) / hop).map(|i| i * hop).collect()
}

/// Splits a clip into overlapping segments (1 s every 0.5 s by default).
/// Trailing audio that cannot fill a whole segment is dropped.
pub fn segment_stream(clip: &AudioClip, params: &FeatureParams) -> Result<Vec<AudioClip>> {
    let seg = params.segment_samples();
    if clip.len() < seg {
        return Err(Error::InvalidAudio(format!(
            "clip of {} samples is shorter than one segment ({seg})",
            clip.len()
        )));
    }
    segment_starts(clip.len(), params)
        .into_iter()
        .map(|s| clip.slice(s, seg))
        .collect()
}
