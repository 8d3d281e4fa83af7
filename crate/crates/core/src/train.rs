//! Contrastive training: batch sampling, Adam/LAMB, cosine schedule,
//! step log and per-epoch checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::augment::{stream_rng, Augmentor, PoolSplit};
use crate::autodiff::{ParamStore, Scalar, Tape};
use crate::contrastive::ntxent;
use crate::encoder::Encoder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// N: embeddings per batch, i.e. N/2 sources and their replicas.
    pub batch_size: usize,
    pub tau: f64,
    /// Defaults to `1e-4 * N / 640`.
    pub lr_init: Option<f64>,
    pub lr_min: f64,
    pub epochs: usize,
    /// Caps the run; the schedule then decays over the capped length.
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when unset.
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 120,
            tau: crate::contrastive::DEFAULT_TAU,
            lr_init: None,
            lr_min: 1e-7,
            epochs: 100,
            max_steps: None,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_init(&self) -> f64 {
        self.lr_init.unwrap_or(1e-4 * self.batch_size as f64 / 640.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::arg(format!("batch size must be even and >= 2, got {}", self.batch_size)));
        }
        let lr = self.lr_init();
        if !(lr > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::arg(format!("need lr_init > lr_min > 0, got {lr} and {}", self.lr_min)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::arg("tau must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::arg("optimizer constants out of range"));
        }
        Ok(())
    }

    pub fn sources_per_step(&self) -> usize {
        self.batch_size / 2
    }

    pub fn steps_per_epoch(&self, num_sources: usize) -> usize {
        num_sources / self.sources_per_step()
    }

    pub fn total_steps(&self, num_sources: usize) -> usize {
        let full = self.steps_per_epoch(num_sources) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Cosine decay from `lr_init` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let x = t.min(total) as f64 / total as f64;
    lr_min + (lr_init - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Adam or LAMB with bias-corrected moments. LAMB rescales each parameter
/// tensor's Adam direction `r` by the trust ratio `||w|| / ||r||`.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![S::zero(); p.value.len()]).collect();
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig, params: &ParamStore<S>) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            ..Self::new(cfg.optimizer, params)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore<S>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        let mut r = Vec::new();
        for (pi, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            r.clear();
            for (k, (&w, &g)) in p.value.data().iter().zip(p.grad.data()).enumerate() {
                let g = g.f64();
                let mk = b1 * m[k].f64() + (1.0 - b1) * g;
                let vk = b2 * v[k].f64() + (1.0 - b2) * g * g;
                m[k] = S::of(mk);
                v[k] = S::of(vk);
                r.push((mk / bc1) / ((vk / bc2).sqrt() + self.eps) + self.weight_decay * w.f64());
            }
            let scale = match self.kind {
                OptimizerKind::Adam => lr,
                OptimizerKind::Lamb => {
                    let wn = p.value.sq_norm().sqrt();
                    let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    lr * if wn > 0.0 && rn > 0.0 { wn / rn } else { 1.0 }
                }
            };
            for (w, &rk) in p.value.data_mut().iter_mut().zip(&r) {
                *w = S::of(w.f64() - scale * rk);
            }
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = S::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Cuts training sources of `source_len` samples from each track every
/// `hop` samples.
pub fn extract_sources(tracks: &[AudioClip], source_len: usize, hop: usize) -> Result<Vec<AudioClip>> {
    if source_len == 0 || hop == 0 {
        return Err(Error::arg("source length and hop must be positive"));
    }
    let mut out = Vec::new();
    for track in tracks {
        let mut start = 0;
        while start + source_len <= track.len() {
            out.push(track.slice(start, source_len)?);
            start += hop;
        }
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pair_accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

// Disjoint RNG stream ranges under the training seed.
const EPOCH_STREAM: u64 = 1 << 62;
const MASK_STREAM: u64 = 1 << 61;

pub struct Trainer<'a> {
    cfg: TrainConfig,
    augmentor: &'a Augmentor,
    checkpoint_dir: Option<PathBuf>,
    log: Option<Box<dyn Write + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, augmentor: &'a Augmentor) -> Result<Self> {
        cfg.validate()?;
        augmentor.require_split(PoolSplit::Train)?;
        Ok(Self { cfg, augmentor, checkpoint_dir: None, log: None })
    }

    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    /// Step records are written here as JSON lines.
    pub fn with_log(mut self, w: impl Write + 'a) -> Self {
        self.log = Some(Box::new(w));
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Loss and gradient for one batch; gradients are left in the store.
    pub fn batch_step(
        &self,
        encoder: &mut Encoder<f32>,
        sources: &[&AudioClip],
        streams: &[u64],
        mask_stream: u64,
    ) -> Result<(f64, f64)> {
        let mels = self.augmentor.batch(sources, streams, mask_stream)?;
        let x = encoder.batch_tensor(&mels)?;
        let (loss, acc, grads) = {
            let mut tape = Tape::new(encoder.params());
            let xv = tape.input(x);
            let z = encoder.forward(&mut tape, xv)?;
            let out = ntxent(tape.value(z), self.cfg.tau)?;
            let grads = tape.backward(z, out.grad)?;
            (out.loss, out.pair_accuracy, grads)
        };
        encoder.params_mut().zero_grad();
        grads.accumulate_into(encoder.params_mut());
        Ok((loss, acc))
    }

    pub fn run(&mut self, encoder: &mut Encoder<f32>, sources: &[AudioClip]) -> Result<TrainSummary> {
        let need = self.augmentor.source_samples();
        if let Some(bad) = sources.iter().position(|s| s.len() != need) {
            return Err(Error::arg(format!(
                "source {bad} has {} samples, expected {need}",
                sources[bad].len()
            )));
        }
        let per_step = self.cfg.sources_per_step();
        if sources.len() < per_step {
            return Err(Error::arg(format!(
                "{} sources cannot fill a batch of {} pairs",
                sources.len(),
                per_step
            )));
        }
        let total = self.cfg.total_steps(sources.len());
        let steps_per_epoch = self.cfg.steps_per_epoch(sources.len());
        let (lr_init, lr_min) = (self.cfg.lr_init(), self.cfg.lr_min);
        let mut opt = Optimizer::from_config(&self.cfg, encoder.params());
        let mut summary = TrainSummary { steps: 0, records: Vec::new(), checkpoints: Vec::new() };
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            if step >= total {
                break;
            }
            let mut order: Vec<usize> = (0..sources.len()).collect();
            order.shuffle(&mut stream_rng(self.cfg.seed, EPOCH_STREAM + epoch as u64));
            for chunk in order.chunks_exact(per_step).take(steps_per_epoch) {
                if step >= total {
                    break;
                }
                let batch: Vec<&AudioClip> = chunk.iter().map(|&i| &sources[i]).collect();
                let streams: Vec<u64> = (0..per_step).map(|b| (step * per_step + b) as u64).collect();
                let (loss, pair_accuracy) = self.batch_step(encoder, &batch, &streams, MASK_STREAM + step as u64)?;
                let grad_norm = match self.cfg.clip_grad_norm {
                    Some(c) => clip_grad_norm(encoder.params_mut(), c),
                    None => encoder.params().grad_norm(),
                };
                if !grad_norm.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
                }
                let lr = cosine_lr(step, total, lr_init, lr_min);
                opt.step(encoder.params_mut(), lr);
                let rec = StepRecord { step, epoch, lr, loss, pair_accuracy, grad_norm };
                if let Some(log) = self.log.as_mut() {
                    serde_json::to_writer(&mut *log, &rec)?;
                    log.write_all(b"\n")?;
                }
                log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.4} acc {pair_accuracy:.3}");
                summary.records.push(rec);
                step += 1;
            }
            if let Some(dir) = &self.checkpoint_dir {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                encoder.save(&path)?;
                summary.checkpoints.push(path);
            }
            if let Some(log) = self.log.as_mut() {
                log.flush()?;
            }
        }
        summary.steps = step;
        Ok(summary)
    }
}

/// Loss of one fixed batch without updating anything.
pub fn evaluate_batch(
    encoder: &Encoder<f32>,
    augmentor: &Augmentor,
    sources: &[&AudioClip],
    streams: &[u64],
    tau: f64,
) -> Result<f64> {
    let mels = augmentor.batch(sources, streams, MASK_STREAM)?;
    let mut tape = Tape::inference(encoder.params());
    let x = tape.input(encoder.batch_tensor(&mels)?);
    let z = encoder.forward(&mut tape, x)?;
    Ok(ntxent(tape.value(z), tau)?.loss)
}
