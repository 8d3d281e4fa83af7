//! Procedural stand-ins for a music corpus, background noise and impulse
//! responses. Everything is a pure function of `(seed, split, index)`, and
//! the train and test sides draw from disjoint RNG streams.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{write_wav, AudioClip, CANONICAL_RATE};
use crate::augment::{stream_rng, AugmentPools, PoolSplit};
use crate::error::Result;

const SR: f32 = CANONICAL_RATE as f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Music = 1,
    Noise = 2,
    MicIr = 3,
    RoomIr = 4,
}

fn rng_for(seed: u64, kind: Kind, split: PoolSplit, index: u64) -> ChaCha8Rng {
    let side = match split {
        PoolSplit::Train => 0,
        PoolSplit::Test => 1,
    };
    stream_rng(seed, ((kind as u64) << 40) | (side << 32) | index)
}

fn midi_hz(note: f32) -> f32 {
    440.0 * 2f32.powf((note - 69.0) / 12.0)
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// A pitched voice: harmonic spectrum plus attack/decay envelope.
struct Timbre {
    harmonics: Vec<f32>,
    attack: f32,
    decay: f32,
    vibrato: f32,
}

impl Timbre {
    fn random(rng: &mut ChaCha8Rng, bright: bool) -> Self {
        let n = rng.random_range(3..10);
        let tilt: f32 = rng.random_range(if bright { 0.5..0.9 } else { 0.2..0.6 });
        let harmonics = (0..n).map(|h| tilt.powi(h) * rng.random_range(0.3..1.0)).collect();
        Self {
            harmonics,
            attack: rng.random_range(0.003..0.04),
            decay: rng.random_range(1.5..8.0),
            vibrato: rng.random_range(0.0..0.006),
        }
    }

    /// Adds one note into `out` starting at sample `start`.
    fn render(&self, out: &mut [f32], start: usize, len: usize, hz: f32, gain: f32) {
        let end = (start + len + (0.05 * SR) as usize).min(out.len());
        for (n, slot) in out[start.min(end)..end].iter_mut().enumerate() {
            let t = n as f32 / SR;
            let env = (t / self.attack).min(1.0) * (-self.decay * t).exp();
            let release = if n > len { (-((n - len) as f32) / (0.01 * SR)).exp() } else { 1.0 };
            let f = hz * (1.0 + self.vibrato * (TAU * 5.0 * t).sin());
            let mut s = 0.0;
            for (h, &a) in self.harmonics.iter().enumerate() {
                let fh = f * (h + 1) as f32;
                if fh < 0.48 * SR {
                    s += a * (TAU * fh * t).sin();
                }
            }
            *slot += gain * env * release * s;
        }
    }
}

const SCALES: [&[i32]; 5] = [
    &[0, 2, 4, 5, 7, 9, 11],
    &[0, 2, 3, 5, 7, 8, 10],
    &[0, 2, 3, 5, 7, 9, 10],
    &[0, 2, 4, 7, 9],
    &[0, 3, 5, 7, 10],
];

fn scale_note(root: i32, scale: &[i32], degree: i32) -> f32 {
    let n = scale.len() as i32;
    let oct = degree.div_euclid(n);
    (root + 12 * oct + scale[degree.rem_euclid(n) as usize]) as f32
}

/// Percussion hit: a pitch-swept sine (kick), noise burst (snare) or short
/// bright noise (hat).
fn drum(out: &mut [f32], start: usize, kind: usize, gain: f32, rng: &mut ChaCha8Rng) {
    let len = [(0.25 * SR) as usize, (0.18 * SR) as usize, (0.05 * SR) as usize][kind];
    let mut lp = 0.0f32;
    let mut prev = 0.0f32;
    for n in 0..len.min(out.len().saturating_sub(start)) {
        let t = n as f32 / SR;
        let v = match kind {
            0 => (TAU * (50.0 + 120.0 * (-30.0 * t).exp()) * t).sin() * (-18.0 * t).exp(),
            1 => {
                let w = gauss(rng);
                lp = 0.6 * lp + 0.4 * w;
                (0.7 * lp + 0.3 * (TAU * 190.0 * t).sin()) * (-25.0 * t).exp()
            }
            _ => {
                let w = gauss(rng);
                let hp = w - prev;
                prev = w;
                0.5 * hp * (-80.0 * t).exp()
            }
        };
        out[start + n] += gain * v;
    }
}

/// A procedurally composed piece: chord pads, bass, a non-repeating melody
/// and a drum pattern, all randomized per track.
pub fn music_track(seed: u64, split: PoolSplit, index: u64, secs: f32) -> AudioClip {
    let mut rng = rng_for(seed, Kind::Music, split, index);
    let len = (secs * SR) as usize;
    let mut out = vec![0.0f32; len];
    let bpm: f32 = rng.random_range(70.0..160.0);
    let eighth = (30.0 / bpm * SR) as usize;
    let root = rng.random_range(45..58);
    let scale = SCALES[rng.random_range(0..SCALES.len())];
    let (pad, bass, lead) = (Timbre::random(&mut rng, false), Timbre::random(&mut rng, false), Timbre::random(&mut rng, true));
    let progression: Vec<i32> = (0..4).map(|_| rng.random_range(0..scale.len() as i32)).collect();
    let pattern: Vec<[bool; 3]> = (0..16)
        .map(|s| {
            [
                s % 8 == 0 || rng.random_bool(0.15),
                s % 8 == 4 || rng.random_bool(0.08),
                rng.random_bool(0.6),
            ]
        })
        .collect();
    let drums_on = rng.random_bool(0.8);
    let (g_pad, g_bass, g_lead, g_drum) = (
        rng.random_range(0.08..0.2),
        rng.random_range(0.15..0.35),
        rng.random_range(0.2..0.45),
        rng.random_range(0.2..0.5),
    );
    let mut degree: i32 = rng.random_range(0..scale.len() as i32) + scale.len() as i32;
    let mut step = 0usize;
    while step * eighth < len {
        let at = step * eighth;
        let bar = step / 8;
        let chord = progression[bar % 4];
        if step.is_multiple_of(8) {
            for k in [0, 2, 4] {
                let note = scale_note(root, scale, chord + k) + 12.0;
                pad.render(&mut out, at, 8 * eighth, midi_hz(note), g_pad);
            }
        }
        if step.is_multiple_of(2) {
            let note = scale_note(root, scale, chord) - 12.0;
            bass.render(&mut out, at, 2 * eighth, midi_hz(note), g_bass);
        }
        if rng.random_bool(0.8) {
            degree = (degree + rng.random_range(-3..=3)).clamp(0, 3 * scale.len() as i32);
            let dur = eighth * rng.random_range(1..3);
            let accent = rng.random_range(0.6..1.0);
            lead.render(&mut out, at, dur, midi_hz(scale_note(root, scale, degree) + 12.0), g_lead * accent);
        }
        if drums_on {
            for (kind, &hit) in pattern[step % 16].iter().enumerate() {
                if hit {
                    drum(&mut out, at, kind, g_drum * rng.random_range(0.7..1.0), &mut rng);
                }
            }
        }
        step += 1;
    }
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    let target = rng.random_range(0.5..0.9);
    out.iter_mut().for_each(|v| *v *= target / peak);
    AudioClip::new(out, CANONICAL_RATE).expect("synthesized samples are finite")
}

/// Background noise of one of several characters: colored noise, babble,
/// machine hum, clatter or wind-like rumble.
pub fn noise_clip(seed: u64, split: PoolSplit, index: u64, secs: f32) -> AudioClip {
    let mut rng = rng_for(seed, Kind::Noise, split, index);
    let len = (secs * SR) as usize;
    let mut out = vec![0.0f32; len];
    match rng.random_range(0..5) {
        0 => {
            let a: f32 = rng.random_range(0.0..0.98);
            let mut y = 0.0;
            for v in &mut out {
                y = a * y + gauss(&mut rng);
                *v = y;
            }
        }
        1 => {
            for _ in 0..rng.random_range(3..8) {
                let f0: f32 = rng.random_range(90.0..260.0);
                let rate: f32 = rng.random_range(2.5..6.0);
                let ph: f32 = rng.random_range(0.0..TAU);
                let mut phase = 0.0f32;
                for (n, v) in out.iter_mut().enumerate() {
                    let t = n as f32 / SR;
                    let f = f0 * (1.0 + 0.1 * (TAU * 0.3 * t + ph).sin());
                    phase += TAU * f / SR;
                    let syll = (TAU * rate * t + ph).sin().max(0.0);
                    let buzz: f32 = (1..12).map(|h| (phase * h as f32).sin() / h as f32).sum();
                    *v += syll * buzz;
                }
            }
        }
        2 => {
            let base: f32 = [50.0, 60.0, 100.0, 120.0][rng.random_range(0..4)];
            let amps: Vec<f32> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut y = 0.0;
            for (n, v) in out.iter_mut().enumerate() {
                let t = n as f32 / SR;
                let hum: f32 = amps.iter().enumerate().map(|(h, a)| a * (TAU * base * (h + 1) as f32 * t).sin()).sum();
                y = 0.9 * y + 0.3 * gauss(&mut rng);
                *v = hum + y;
            }
        }
        3 => {
            let mut y = 0.0;
            for v in out.iter_mut() {
                y = 0.995 * y + 0.05 * gauss(&mut rng);
                *v = y;
            }
            let events = (secs * rng.random_range(2.0..10.0)) as usize;
            for _ in 0..events {
                let at = rng.random_range(0..len);
                let f: f32 = rng.random_range(500.0..3500.0);
                let decay: f32 = rng.random_range(20.0..80.0);
                let g: f32 = rng.random_range(0.5..2.0);
                for n in 0..((0.15 * SR) as usize).min(len - at) {
                    let t = n as f32 / SR;
                    out[at + n] += g * (TAU * f * t).sin() * (-decay * t).exp();
                }
            }
        }
        _ => {
            let mut y = 0.0;
            let rate: f32 = rng.random_range(0.05..0.5);
            for (n, v) in out.iter_mut().enumerate() {
                let t = n as f32 / SR;
                y = 0.97 * y + gauss(&mut rng);
                *v = y * (1.0 + 0.6 * (TAU * rate * t).sin());
            }
        }
    }
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    AudioClip::new(out, CANONICAL_RATE).expect("synthesized samples are finite")
}

/// Short device response: a direct tap plus a few damped resonances.
pub fn mic_ir(seed: u64, split: PoolSplit, index: u64) -> Vec<f32> {
    let mut rng = rng_for(seed, Kind::MicIr, split, index);
    let len = rng.random_range(32..256);
    let mut h = vec![0.0f32; len];
    h[0] = 1.0;
    for _ in 0..rng.random_range(2..6) {
        let f: f32 = rng.random_range(150.0..3800.0);
        let decay: f32 = rng.random_range(150.0..900.0);
        let a: f32 = rng.random_range(-0.9..0.9);
        for (n, v) in h.iter_mut().enumerate().skip(1) {
            let t = n as f32 / SR;
            *v += a * (TAU * f * t).sin() * (-decay * t).exp();
        }
    }
    h
}

/// Room response: direct path, sparse early reflections and an
/// exponentially decaying diffuse tail.
pub fn room_ir(seed: u64, split: PoolSplit, index: u64) -> Vec<f32> {
    let mut rng = rng_for(seed, Kind::RoomIr, split, index);
    let rt60: f32 = rng.random_range(0.15..0.8);
    let len = ((rt60 * SR) as usize).max(64);
    let mut h = vec![0.0f32; len];
    let direct = rng.random_range(0..40).min(len - 1);
    h[direct] = 1.0;
    for _ in 0..rng.random_range(4..14) {
        let at = (direct + rng.random_range(8..(0.05 * SR) as usize)).min(len - 1);
        h[at] += rng.random_range(-0.7..0.7);
    }
    let tail: f32 = rng.random_range(0.1..0.5);
    let mut lp = 0.0f32;
    for (n, v) in h.iter_mut().enumerate().skip(direct + 1) {
        let t = (n - direct) as f32 / SR;
        lp = 0.5 * lp + 0.5 * gauss(&mut rng);
        *v += tail * lp * (-6.9 * t / rt60).exp();
    }
    h
}

/// Counts and durations of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train_tracks: usize,
    pub test_tracks: usize,
    pub track_secs: f32,
    pub noise_clips: usize,
    pub noise_secs: f32,
    pub mic_irs: usize,
    pub room_irs: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_tracks: 240,
            test_tracks: 100,
            track_secs: 30.0,
            noise_clips: 40,
            noise_secs: 30.0,
            mic_irs: 20,
            room_irs: 20,
        }
    }
}

impl CorpusSpec {
    pub fn tracks(&self, split: PoolSplit) -> Vec<AudioClip> {
        let n = match split {
            PoolSplit::Train => self.train_tracks,
            PoolSplit::Test => self.test_tracks,
        };
        (0..n as u64).map(|i| music_track(self.seed, split, i, self.track_secs)).collect()
    }

    pub fn pools(&self, split: PoolSplit) -> Result<AugmentPools> {
        let n = |k| 0..k as u64;
        AugmentPools::new(
            split,
            n(self.noise_clips).map(|i| noise_clip(self.seed, split, i, self.noise_secs)).collect(),
            n(self.mic_irs).map(|i| mic_ir(self.seed, split, i)).collect(),
            n(self.room_irs).map(|i| room_ir(self.seed, split, i)).collect(),
        )
    }

    /// Writes `music.{train,test}`, `noise.*`, `mic_ir.*` and `room_ir.*`
    /// directories of 16-bit WAV files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in [PoolSplit::Train, PoolSplit::Test] {
            let sub = |name: &str| -> Result<std::path::PathBuf> {
                let p = dir.join(format!("{name}{}", split.suffix()));
                fs::create_dir_all(&p)?;
                Ok(p)
            };
            let music = sub("music")?;
            for (i, t) in self.tracks(split).iter().enumerate() {
                write_wav(music.join(format!("track_{i:04}.wav")), t)?;
            }
            let pools = self.pools(split)?;
            let noise = sub("noise")?;
            for (i, c) in pools.noise().iter().enumerate() {
                write_wav(noise.join(format!("noise_{i:03}.wav")), c)?;
            }
            for (name, irs) in [("mic_ir", pools.mic_irs()), ("room_ir", pools.room_irs())] {
                let d = sub(name)?;
                for (i, h) in irs.iter().enumerate() {
                    let peak = h.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                    let clip = AudioClip::new(h.iter().map(|v| v / peak).collect(), CANONICAL_RATE)?;
                    write_wav(d.join(format!("{name}_{i:03}.wav")), &clip)?;
                }
            }
        }
        Ok(())
    }
}
