//! The fingerprinter network.
//!
//! `f` is eight separable-convolution (SC) blocks; each block runs a 1xk conv
//! along time (stride 1x2), layer norm, ReLU, then a kx1 conv along frequency
//! (stride 2x1), layer norm, ReLU. Channels go 1 -> d -> d -> 2d -> 2d -> 4d
//! -> 4d -> h -> h while the 256x32 input shrinks to 1x1. `g` splits the
//! h-vector into d chunks, maps each chunk through its own
//! affine(v->u) -> ELU -> affine(u->1), and L2-normalizes the d outputs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{he_uniform, ParamId, ParamStore, Scalar, Tape, Tensor, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Fingerprint dimension.
    pub d: usize,
    /// Encoder output width.
    pub h: usize,
    /// Hidden width of each projection head.
    pub u: usize,
    pub mel_bins: usize,
    pub frames: usize,
    /// Kernel length of the separable convolutions.
    pub kernel: usize,
    /// Conv biases ahead of layer norm (redundant with the LN bias).
    pub conv_bias: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            h: 1024,
            u: 32,
            mel_bins: 256,
            frames: 32,
            kernel: 3,
            conv_bias: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Input width of each projection head, `h / d`.
    pub fn v(&self) -> usize {
        self.h / self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.u == 0 || self.kernel == 0 {
            return Err(Error::arg("d, h, u and kernel must be positive"));
        }
        if !self.h.is_multiple_of(self.d) {
            return Err(Error::arg(format!("h = {} is not divisible by d = {}", self.h, self.d)));
        }
        if self.mel_bins == 0 || self.frames == 0 {
            return Err(Error::arg("input shape must be non-empty"));
        }
        Ok(())
    }

    /// Output channels of the eight SC blocks.
    pub fn channel_ladder(&self) -> [usize; 8] {
        let d = self.d;
        [d, d, 2 * d, 2 * d, 4 * d, 4 * d, self.h, self.h]
    }

    /// Spatial size `(freq, time)` after each block.
    pub fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let mut fs = (self.mel_bins, self.frames);
        (0..8)
            .map(|_| {
                fs = (fs.0.div_ceil(2), fs.1.div_ceil(2));
                fs
            })
            .collect()
    }
}

/// A unit-norm segment embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint(Vec<f32>);

impl Fingerprint {
    /// Normalizes `v`; a zero vector is rejected.
    pub fn from_vec(mut v: Vec<f32>) -> Result<Self> {
        let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numerical("cannot normalize a zero or non-finite vector".into()));
        }
        v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
        Ok(Self(v))
    }

    /// Wraps a vector that is already unit norm.
    pub fn from_unit(v: Vec<f32>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f32]) -> f32 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f32 {
        self.dot(&self.0).sqrt()
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct ScBlockParams {
    pub conv_time: ParamId,
    pub conv_time_bias: Option<ParamId>,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub conv_freq: ParamId,
    pub conv_freq_bias: Option<ParamId>,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl ScBlockParams {
    /// Registers a block's parameters under `prefix` with He-uniform weights.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv_time = store.add(
            &format!("{prefix}.conv_1x{k}.weight"),
            he_uniform(&[c_out, c_in, 1, k], c_in * k, rng),
        )?;
        let conv_time_bias = bias
            .then(|| store.add(&format!("{prefix}.conv_1x{k}.bias"), Tensor::zeros(&[c_out])))
            .transpose()?;
        let ln1_gain = store.add(&format!("{prefix}.ln1.gain"), Tensor::from_fn(&[c_out], |_| S::one()))?;
        let ln1_bias = store.add(&format!("{prefix}.ln1.bias"), Tensor::zeros(&[c_out]))?;
        let conv_freq = store.add(
            &format!("{prefix}.conv_{k}x1.weight"),
            he_uniform(&[c_out, c_out, k, 1], c_out * k, rng),
        )?;
        let conv_freq_bias = bias
            .then(|| store.add(&format!("{prefix}.conv_{k}x1.bias"), Tensor::zeros(&[c_out])))
            .transpose()?;
        let ln2_gain = store.add(&format!("{prefix}.ln2.gain"), Tensor::from_fn(&[c_out], |_| S::one()))?;
        let ln2_bias = store.add(&format!("{prefix}.ln2.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            conv_time,
            conv_time_bias,
            ln1_gain,
            ln1_bias,
            conv_freq,
            conv_freq_bias,
            ln2_gain,
            ln2_bias,
        })
    }
}

/// One SC block: `ReLU(LN(Conv_kx1/s2x1(ReLU(LN(Conv_1xk/s1x2(x))))))`.
pub fn sc_block<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &ScBlockParams) -> Result<Var> {
    let w = tape.param(p.conv_time);
    let b = p.conv_time_bias.map(|b| tape.param(b));
    let y = tape.conv2d(x, w, b, (1, 2))?;
    let (g, bb) = (tape.param(p.ln1_gain), tape.param(p.ln1_bias));
    let y = tape.layer_norm(y, g, bb, LN_EPS)?;
    let y = tape.relu(y)?;
    let w = tape.param(p.conv_freq);
    let b = p.conv_freq_bias.map(|b| tape.param(b));
    let y = tape.conv2d(y, w, b, (2, 1))?;
    let (g, bb) = (tape.param(p.ln2_gain), tape.param(p.ln2_bias));
    let y = tape.layer_norm(y, g, bb, LN_EPS)?;
    tape.relu(y)
}

#[derive(Debug, Clone)]
struct HeadParams {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Default chunk size for batched inference.
const INFERENCE_BATCH: usize = 32;

#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar = f32> {
    cfg: EncoderConfig,
    params: ParamStore<S>,
    blocks: Vec<ScBlockParams>,
    head: HeadParams,
}

impl<S: Scalar> Encoder<S> {
    /// Freshly initialized network; weights depend only on `cfg.seed`.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(8);
        let mut c_in = 1;
        for (i, &c_out) in cfg.channel_ladder().iter().enumerate() {
            blocks.push(ScBlockParams::init(
                &mut params,
                &format!("f.block{}", i + 1),
                c_in,
                c_out,
                cfg.kernel,
                cfg.conv_bias,
                &mut rng,
            )?);
            c_in = c_out;
        }
        let (d, u, v) = (cfg.d, cfg.u, cfg.v());
        let head = HeadParams {
            fc1_w: params.add("g.fc1.weight", he_uniform(&[d, u, v], v, &mut rng))?,
            fc1_b: params.add("g.fc1.bias", Tensor::zeros(&[d, u]))?,
            fc2_w: params.add("g.fc2.weight", he_uniform(&[d, 1, u], u, &mut rng))?,
            fc2_b: params.add("g.fc2.bias", Tensor::zeros(&[d, 1]))?,
        };
        Ok(Self { cfg, params, blocks, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[ScBlockParams] {
        &self.blocks
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Same network in another precision.
    pub fn cast<T: Scalar>(&self) -> Encoder<T> {
        Encoder {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    /// `f`: `[B, 1, F, T]` -> `[B, h]`.
    pub fn encode_f(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.cfg.mel_bins || shape[3] != self.cfg.frames {
            return Err(Error::shape(format!(
                "encoder expects [B, 1, {}, {}], got {shape:?}",
                self.cfg.mel_bins, self.cfg.frames
            )));
        }
        let mut y = x;
        for block in &self.blocks {
            y = sc_block(tape, y, block)?;
        }
        let out = tape.value(y).shape().to_vec();
        tape.reshape(y, &[out[0], out[1] * out[2] * out[3]])
    }

    /// `g`: `[B, h]` -> unit-norm `[B, d]`.
    pub fn project_g(&self, tape: &mut Tape<S>, e: Var) -> Result<Var> {
        let w1 = tape.param(self.head.fc1_w);
        let b1 = tape.param(self.head.fc1_b);
        let hidden = tape.grouped_linear(e, w1, Some(b1))?;
        let hidden = tape.elu(hidden)?;
        let w2 = tape.param(self.head.fc2_w);
        let b2 = tape.param(self.head.fc2_b);
        let z = tape.grouped_linear(hidden, w2, Some(b2))?;
        tape.l2_normalize(z)
    }

    /// `g(f(x))`.
    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let e = self.encode_f(tape, x)?;
        self.project_g(tape, e)
    }

    /// Stacks spectrograms into a `[B, 1, F, T]` input tensor.
    pub fn batch_tensor(&self, mels: &[MelSpectrogram]) -> Result<Tensor<S>> {
        let (f, t) = (self.cfg.mel_bins, self.cfg.frames);
        let mut data = Vec::with_capacity(mels.len() * f * t);
        for m in mels {
            if m.mel_bins() != f || m.frames() != t {
                return Err(Error::shape(format!(
                    "spectrogram is {}x{}, encoder expects {f}x{t}",
                    m.mel_bins(),
                    m.frames()
                )));
            }
            data.extend(m.values().iter().map(|&v| S::of(f64::from(v))));
        }
        Tensor::new(&[mels.len(), 1, f, t], data)
    }

    /// Embeddings for a batch of spectrograms; no state is touched.
    pub fn fingerprint_batch(&self, mels: &[MelSpectrogram]) -> Result<Vec<Fingerprint>> {
        let mut out = Vec::with_capacity(mels.len());
        for chunk in mels.chunks(INFERENCE_BATCH) {
            let mut tape = Tape::inference(&self.params);
            let x = tape.input(self.batch_tensor(chunk)?);
            let z = self.forward(&mut tape, x)?;
            for row in tape.value(z).data().chunks(self.cfg.d) {
                out.push(Fingerprint(row.iter().map(|v| v.f64() as f32).collect()));
            }
        }
        Ok(out)
    }

    pub fn fingerprint(&self, mel: &MelSpectrogram) -> Result<Fingerprint> {
        Ok(self.fingerprint_batch(std::slice::from_ref(mel))?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.cfg)?;
        self.params.save_checkpoint(path, &meta)
    }

    /// Loads a checkpoint written by [`Encoder::save`], checking that every
    /// parameter matches the architecture its stored config describes.
    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = ParamStore::<S>::load_checkpoint(path)?;
        let cfg: EncoderConfig = serde_json::from_str(&meta).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad encoder config: {e}"),
        })?;
        let mut enc = Self::new(cfg)?;
        if store.len() != enc.params.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} parameters, architecture has {}", store.len(), enc.params.len()),
            });
        }
        for ((_, want), (_, got)) in enc.params.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!(
                        "parameter {} {:?} does not match expected {} {:?}",
                        got.name,
                        got.value.shape(),
                        want.name,
                        want.value.shape()
                    ),
                });
            }
        }
        enc.params = store;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { d: 4, h: 16, u: 3, mel_bins: 8, frames: 8, seed: 3, ..Default::default() }
    }

    fn random_mel(f: usize, t: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram::new((0..f * t).map(|_| rng.random_range(-80.0..0.0)).collect(), f, t).unwrap()
    }

    /// Independent tally: per block, conv 1xk (c_in*c_out*k) + conv kx1
    /// (c_out*c_out*k) + two layer norms (4*c_out); head d*(u*v + u + u + 1).
    fn param_count_oracle(cfg: &EncoderConfig) -> usize {
        let d = cfg.d;
        let outs = [d, d, 2 * d, 2 * d, 4 * d, 4 * d, cfg.h, cfg.h];
        let ins = [1, d, d, 2 * d, 2 * d, 4 * d, 4 * d, cfg.h];
        let k = cfg.kernel;
        let f: usize = ins.iter().zip(&outs).map(|(&i, &o)| i * o * k + o * o * k + 4 * o).sum();
        f + d * (cfg.u * cfg.v() + cfg.u + cfg.u + 1)
    }

    #[test]
    fn default_shapes_and_parameter_count() {
        let cfg = EncoderConfig { d: 128, ..Default::default() };
        assert_eq!(cfg.v(), 8);
        let times: Vec<usize> = cfg.spatial_trace().iter().map(|s| s.1).collect();
        assert_eq!(times, [16, 8, 4, 2, 1, 1, 1, 1]);
        assert_eq!(cfg.spatial_trace()[7], (1, 1));
        let enc = Encoder::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(enc.num_parameters(), param_count_oracle(&cfg));
        let cfg64 = EncoderConfig { d: 64, ..Default::default() };
        let enc64 = Encoder::<f32>::new(cfg64.clone()).unwrap();
        assert_eq!(enc64.num_parameters(), param_count_oracle(&cfg64));
    }

    #[test]
    fn first_block_shape() {
        let cfg = EncoderConfig { d: 16, h: 64, ..Default::default() };
        let enc = Encoder::<f32>::new(cfg).unwrap();
        let mut tape = Tape::inference(enc.params());
        let x = tape.input(enc.batch_tensor(&[random_mel(256, 32, 1)]).unwrap());
        let y = sc_block(&mut tape, x, &enc.blocks[0]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16, 128, 16]);
        let e = enc.encode_f(&mut tape, x).unwrap();
        assert_eq!(tape.value(e).shape(), &[1, 64]);
    }

    #[test]
    fn zero_input_gives_zero_block_output() {
        let enc = Encoder::<f64>::new(small_cfg()).unwrap();
        let mut tape = Tape::inference(enc.params());
        let x = tape.input(Tensor::zeros(&[2, 1, 8, 8]));
        let y = sc_block(&mut tape, x, &enc.blocks[0]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sc_block_gradients() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f64>::new(cfg).unwrap();
        let block = enc.blocks[1].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[1, 4, 8, 8], |_| rng.random_range(-1.0..1.0));
        let report = grad_check(enc.params_mut(), &[x], 1e-4, 1, |t, v| sc_block(t, v[0], &block)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn full_network_gradients() {
        let mut enc = Encoder::<f64>::new(small_cfg()).unwrap();
        let net = enc.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let report = grad_check(enc.params_mut(), &[x], 1e-5, 2, |t, v| net.forward(t, v[0])).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn fingerprints_are_unit_and_deterministic() {
        let cfg = EncoderConfig { d: 16, h: 64, u: 8, seed: 1, ..Default::default() };
        let enc = Encoder::<f32>::new(cfg).unwrap();
        let mels: Vec<_> = (0..5).map(|s| random_mel(256, 32, s)).collect();
        let fps = enc.fingerprint_batch(&mels).unwrap();
        for fp in &fps {
            assert_eq!(fp.dim(), 16);
            assert!((fp.norm() - 1.0).abs() < 1e-5);
        }
        assert_eq!(fps, enc.fingerprint_batch(&mels).unwrap());
        assert_eq!(fps[2], enc.fingerprint(&mels[2]).unwrap());
        let ip = fps[0].dot(fps[1].as_slice());
        assert!((-1.0..=1.0).contains(&ip));
        assert!(enc.fingerprint(&random_mel(128, 32, 0)).is_err());
    }

    #[test]
    fn permuting_head_weights_permutes_outputs() {
        let cfg = small_cfg();
        let enc = Encoder::<f64>::new(cfg.clone()).unwrap();
        let mut swapped = enc.clone();
        let (u, v) = (cfg.u, cfg.v());
        let (i, j) = (0usize, 2usize);
        let swap_rows = |t: &mut Tensor<f64>, width: usize| {
            let data = t.data_mut();
            for k in 0..width {
                data.swap(i * width + k, j * width + k);
            }
        };
        // Swapping heads i and j means swapping their weights and the input chunks they read.
        swap_rows(&mut swapped.params.get_mut(enc.head.fc1_w).value, u * v);
        swap_rows(&mut swapped.params.get_mut(enc.head.fc1_b).value, u);
        swap_rows(&mut swapped.params.get_mut(enc.head.fc2_w).value, u);
        swap_rows(&mut swapped.params.get_mut(enc.head.fc2_b).value, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Tensor::from_fn(&[1, cfg.h], |_| rng.random_range(-1.0..1.0));
        let mut e_swapped = e.clone();
        for k in 0..v {
            e_swapped.data_mut().swap(i * v + k, j * v + k);
        }
        let head_out = |enc: &Encoder<f64>, e: Tensor<f64>| {
            let mut tape = Tape::new(enc.params());
            let x = tape.input(e);
            let z = enc.project_g(&mut tape, x).unwrap();
            tape.value(z).data().to_vec()
        };
        let a = head_out(&enc, e);
        let b = head_out(&swapped, e_swapped);
        assert!((a[i] - b[j]).abs() < 1e-12 && (a[j] - b[i]).abs() < 1e-12);
        assert!((a[1] - b[1]).abs() < 1e-12 && (a[3] - b[3]).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_fingerprints() {
        let cfg = EncoderConfig { d: 8, h: 32, u: 4, seed: 5, ..Default::default() };
        let enc = Encoder::<f32>::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.ckpt");
        enc.save(&p).unwrap();
        let back = Encoder::<f32>::load(&p).unwrap();
        assert_eq!(back.config(), enc.config());
        let mel = random_mel(256, 32, 8);
        assert_eq!(back.fingerprint(&mel).unwrap(), enc.fingerprint(&mel).unwrap());
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(Encoder::<f32>::new(EncoderConfig { d: 48, h: 1000, ..Default::default() }).is_err());
        assert!(Fingerprint::from_vec(vec![0.0; 4]).is_err());
    }
}
