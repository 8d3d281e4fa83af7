//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! `backward` is a single reverse sweep. Layouts are row-major; feature maps
//! are `[batch, channels, freq, time]`.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, MatView, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.b * self.ho * self.wo
    }
}

/// SAME padding: output `ceil(input / stride)`, with the total padding split
/// so that any odd leftover goes to the trailing edge.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2, total - total / 2)
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<S> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Relu { x: Var },
    Elu { x: Var },
    Reshape { x: Var },
    GroupedLinear { x: Var, w: Var, b: Option<Var>, groups: usize },
    L2Normalize { x: Var, norms: Vec<S> },
}

struct Node<S> {
    value: Option<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    record: bool,
    nan_check: bool,
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// A tape that keeps what `backward` needs.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), record: true, nan_check: false }
    }

    /// Forward-only tape: backward caches are dropped as soon as they are used.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), record: false, nan_check: false }
    }

    /// Fail any op whose output has a NaN or infinity.
    pub fn with_nan_check(mut self) -> Self {
        self.nan_check = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params.get(*id).value,
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        if self.nan_check && !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output at tape node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient `backward` should report.
    pub fn input_with_grad(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs = !self.params.get(id).frozen;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation with SAME zero padding.
    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, kh, kw]`, optional `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d wants 4-D input and weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::shape("conv2d bias must be [Co]"));
            }
        }
        let (ho, ph, _) = same_padding(xs[2], ws[2], stride.0);
        let (wo, pw, _) = same_padding(xs[3], ws[3], stride.1);
        let geom = ConvGeom {
            b: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ho,
            wo,
            ph,
            pw,
        };
        let mut cols = vec![S::zero(); geom.k() * geom.p()];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut yt = vec![S::zero(); geom.co * geom.p()];
        gemm(
            S::one(),
            MatView::rm(self.value(w).data(), geom.co, geom.k()),
            MatView::rm(&cols, geom.k(), geom.p()),
            S::zero(),
            &mut yt,
        );
        let hw = ho * wo;
        let mut y = vec![S::zero(); geom.b * geom.co * hw];
        let bias = b.map(|b| self.value(b).data());
        for co in 0..geom.co {
            let bv = bias.map_or(S::zero(), |bb| bb[co]);
            for bi in 0..geom.b {
                let src = &yt[co * geom.p() + bi * hw..][..hw];
                let dst = &mut y[(bi * geom.co + co) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        if !self.record {
            cols = Vec::new();
        }
        let value = Tensor::new(&[geom.b, geom.co, ho, wo], y)?;
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs)
    }

    /// Normalizes each example over all its non-batch axes jointly, then
    /// applies a per-channel gain and bias (`[C]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("layer_norm wants [B, C, ...]"));
        }
        let (bsz, c) = (xs[0], xs[1]);
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::shape(format!("layer_norm gain/bias must be [{c}]")));
        }
        let per_example: usize = xs[1..].iter().product();
        let spatial = per_example / c.max(1);
        let xd = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); bsz];
        let mut y = vec![S::zero(); xd.len()];
        let n = S::of(per_example as f64);
        for b in 0..bsz {
            let base = b * per_example;
            let ex = &xd[base..][..per_example];
            let mean = lane_sum(ex, |v| v) / n;
            let var = lane_sum(ex, |v| (v - mean) * (v - mean)) / n;
            let is = S::one() / (var + S::of(eps)).sqrt();
            inv_std[b] = is;
            for ch in 0..c {
                let off = base + ch * spatial;
                let (gc, bc) = (g[ch], bb[ch]);
                let rows = xhat[off..][..spatial].iter_mut().zip(&mut y[off..][..spatial]);
                for ((xh, yv), &xv) in rows.zip(&xd[off..][..spatial]) {
                    *xh = (xv - mean) * is;
                    *yv = gc * *xh + bc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        if !self.record {
            xhat = Vec::new();
            inv_std = Vec::new();
        }
        let value = Tensor::new(&xs, y)?;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::new(t.shape(), t.data().iter().map(|&v| v.max(S::zero())).collect())?;
        let needs = self.needs(x);
        self.push(y, Op::Relu { x }, needs)
    }

    /// `x` for positive inputs, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::new(
            t.shape(),
            t.data()
                .iter()
                .map(|&v| if v > S::zero() { v } else { v.exp_m1() })
                .collect(),
        )?;
        let needs = self.needs(x);
        self.push(y, Op::Elu { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push(y, Op::Reshape { x }, needs)
    }

    /// Independent affine maps on `groups` contiguous chunks of each row.
    /// `x: [B, G*in]`, `w: [G, out, in]`, optional `b: [G, out]` -> `[B, G*out]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::shape(format!("grouped_linear wants [B, G*in] and [G, out, in], got {xs:?} and {ws:?}")));
        }
        let (groups, out, inp) = (ws[0], ws[1], ws[2]);
        if xs[1] != groups * inp {
            return Err(Error::shape(format!(
                "grouped_linear input width {} is not {groups} x {inp}",
                xs[1]
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [groups, out] {
                return Err(Error::shape("grouped_linear bias must be [G, out]"));
            }
        }
        let bsz = xs[0];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![S::zero(); bsz * groups * out];
        for r in 0..bsz {
            for g in 0..groups {
                let xrow = &xd[r * groups * inp + g * inp..][..inp];
                for o in 0..out {
                    let wrow = &wd[(g * out + o) * inp..][..inp];
                    let mut acc = bd.map_or(S::zero(), |bb| bb[g * out + o]);
                    for (&a, &c) in xrow.iter().zip(wrow) {
                        acc += a * c;
                    }
                    y[r * groups * out + g * out + o] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[bsz, groups * out], y)?;
        self.push(value, Op::GroupedLinear { x, w, b, groups }, needs)
    }

    /// Row-wise `x / ||x||` on `[B, d]`; a zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("l2_normalize wants [B, d]"));
        }
        let d = t.shape()[1];
        let mut y = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.shape()[0]);
        for (r, row) in y.chunks_mut(d.max(1)).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(n > S::zero()) {
                return Err(Error::Numerical(format!("cannot L2-normalize zero row {r}")));
            }
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        let needs = self.needs(x);
        let value = Tensor::new(t.shape(), y)?;
        self.push(value, Op::L2Normalize { x, norms }, needs)
    }

    /// Backpropagates `seed` (the gradient of some scalar w.r.t. `out`).
    pub fn backward(&self, out: Var, seed: Tensor<S>) -> Result<Grads<S>> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        if !self.record {
            return Err(Error::arg("backward on an inference tape"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => grads[i] = Some(g),
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx: Vec<S> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                        .collect();
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Elu { x } => {
                    let xv = self.value(*x).data();
                    let dx: Vec<S> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { gv * v.exp() })
                        .collect();
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Reshape { x } => self.acc(&mut grads, *x, g.into_data())?,
                Op::L2Normalize { x, norms } => {
                    let y = node.value.as_ref().unwrap().data();
                    let d = y.len() / norms.len().max(1);
                    let mut dx = vec![S::zero(); y.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..][..d], &g.data()[r * d..][..d]);
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                        for k in 0..d {
                            dx[r * d + k] = (gr[k] - yr[k] * dot) / n;
                        }
                    }
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::GroupedLinear { x, w, b, groups } => {
                    self.grouped_linear_backward(&mut grads, &g, *x, *w, *b, *groups)?
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    self.layer_norm_backward(&mut grads, &g, *x, *gain, *bias, xhat, inv_std)?
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    self.conv_backward(&mut grads, &g, *x, *w, *b, geom, cols)?
                }
            }
        }
        let param_of_node = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, param_of_node })
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Vec<S>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        let t = Tensor::new(self.value(v).shape(), g)?;
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
        Ok(())
    }

    fn grouped_linear_backward(
        &self,
        grads: &mut [Option<Tensor<S>>],
        g: &Tensor<S>,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    ) -> Result<()> {
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let ws = self.value(w).shape();
        let (out, inp) = (ws[1], ws[2]);
        let bsz = self.value(x).shape()[0];
        let gd = g.data();
        if self.needs(x) {
            let mut dx = vec![S::zero(); xd.len()];
            for r in 0..bsz {
                for gi in 0..groups {
                    let dxrow = &mut dx[r * groups * inp + gi * inp..][..inp];
                    for o in 0..out {
                        let gv = gd[r * groups * out + gi * out + o];
                        let wrow = &wd[(gi * out + o) * inp..][..inp];
                        for (d, &wv) in dxrow.iter_mut().zip(wrow) {
                            *d += gv * wv;
                        }
                    }
                }
            }
            self.acc(grads, x, dx)?;
        }
        if self.needs(w) {
            let mut dw = vec![S::zero(); wd.len()];
            for r in 0..bsz {
                for gi in 0..groups {
                    let xrow = &xd[r * groups * inp + gi * inp..][..inp];
                    for o in 0..out {
                        let gv = gd[r * groups * out + gi * out + o];
                        let dwrow = &mut dw[(gi * out + o) * inp..][..inp];
                        for (d, &xv) in dwrow.iter_mut().zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            self.acc(grads, w, dw)?;
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let mut db = vec![S::zero(); groups * out];
            for row in gd.chunks(groups * out) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.acc(grads, b, db)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        grads: &mut [Option<Tensor<S>>],
        g: &Tensor<S>,
        x: Var,
        gain: Var,
        bias: Var,
        xhat: &[S],
        inv_std: &[S],
    ) -> Result<()> {
        let xs = self.value(x).shape();
        let (bsz, c) = (xs[0], xs[1]);
        let per_example = xhat.len() / bsz.max(1);
        let spatial = per_example / c.max(1);
        let gv = self.value(gain).data();
        let gd = g.data();
        let mut dgain = vec![S::zero(); c];
        let mut dbias = vec![S::zero(); c];
        let mut dx = vec![S::zero(); xhat.len()];
        let n = S::of(per_example as f64);
        for b in 0..bsz {
            let base = b * per_example;
            let (mut mean_dxh, mut mean_dxh_xh) = (S::zero(), S::zero());
            for ch in 0..c {
                let off = base + ch * spatial;
                let (gs, xs) = (&gd[off..][..spatial], &xhat[off..][..spatial]);
                let s0 = lane_sum(gs, |v| v);
                let s1 = lane_dot(gs, xs);
                dgain[ch] += s1;
                dbias[ch] += s0;
                mean_dxh += gv[ch] * s0;
                mean_dxh_xh += gv[ch] * s1;
            }
            mean_dxh = mean_dxh / n;
            mean_dxh_xh = mean_dxh_xh / n;
            let is = inv_std[b];
            for ch in 0..c {
                let off = base + ch * spatial;
                let gc = gv[ch];
                let rows = dx[off..][..spatial].iter_mut().zip(&gd[off..][..spatial]);
                for ((d, &gdv), &xh) in rows.zip(&xhat[off..][..spatial]) {
                    *d = is * (gdv * gc - mean_dxh - xh * mean_dxh_xh);
                }
            }
        }
        self.acc(grads, x, dx)?;
        self.acc(grads, gain, dgain)?;
        self.acc(grads, bias, dbias)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor<S>>],
        g: &Tensor<S>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[S],
    ) -> Result<()> {
        let hw = geom.ho * geom.wo;
        let p = geom.p();
        // dY laid out as [Co, B*Ho*Wo] to match the forward product.
        let mut gt = vec![S::zero(); geom.co * p];
        for bi in 0..geom.b {
            for co in 0..geom.co {
                gt[co * p + bi * hw..][..hw].copy_from_slice(&g.data()[(bi * geom.co + co) * hw..][..hw]);
            }
        }
        if let Some(b) = b.filter(|&b| self.needs(b)) {
            let db = gt.chunks(p).map(|row| row.iter().copied().sum::<S>()).collect();
            self.acc(grads, b, db)?;
        }
        if self.needs(w) {
            let mut dw = vec![S::zero(); geom.co * geom.k()];
            gemm(
                S::one(),
                MatView::rm(&gt, geom.co, p),
                MatView::rm(cols, geom.k(), p).t(),
                S::zero(),
                &mut dw,
            );
            self.acc(grads, w, dw)?;
        }
        if self.needs(x) {
            let mut dcols = vec![S::zero(); geom.k() * p];
            gemm(
                S::one(),
                MatView::rm(self.value(w).data(), geom.co, geom.k()).t(),
                MatView::rm(&gt, geom.co, p),
                S::zero(),
                &mut dcols,
            );
            let mut dx = vec![S::zero(); geom.b * geom.ci * geom.h * geom.w];
            col2im(&dcols, geom, &mut dx);
            self.acc(grads, x, dx)?;
        }
        Ok(())
    }
}

/// Output columns `ow` whose input column `ow * sw + j - pw` is in range.
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pw.saturating_sub(j).div_ceil(g.sw);
    let hi = (g.w + g.pw).saturating_sub(j).div_ceil(g.sw).min(g.wo);
    (lo.min(hi), hi)
}

/// Rows `(c, i, j)`, columns `(b, oh, ow)`.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.p();
    for c in 0..g.ci {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..][..p];
                let (lo, hi) = valid_cols(g, j);
                for b in 0..g.b {
                    let plane = &x[(b * g.ci + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let out = &mut dst[(b * g.ho + oh) * g.wo..][..g.wo];
                        let ih = (oh * g.sh + i) as isize - g.ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            out.fill(S::zero());
                            continue;
                        }
                        out[..lo].fill(S::zero());
                        out[hi..].fill(S::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * g.sw + j - g.pw;
                        let src = &plane[ih as usize * g.w + first..];
                        for (o, &v) in out[lo..hi].iter_mut().zip(src.iter().step_by(g.sw)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds column gradients back to the input.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.p();
    for c in 0..g.ci {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..][..p];
                let (lo, hi) = valid_cols(g, j);
                if lo == hi {
                    continue;
                }
                let first = lo * g.sw + j - g.pw;
                for b in 0..g.b {
                    let plane = &mut dx[(b * g.ci + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.sh + i) as isize - g.ph as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let srow = &src[(b * g.ho + oh) * g.wo..][lo..hi];
                        let drow = &mut plane[ih as usize * g.w + first..];
                        for (d, &v) in drow.iter_mut().step_by(g.sw).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Sum of `f` over `xs` in eight interleaved partial sums, so the loop
/// vectorizes.
fn lane_sum<S: Scalar>(xs: &[S], f: impl Fn(S) -> S) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v);
        }
    }
    let mut s = rest.iter().fold(S::zero(), |s, &v| s + f(v));
    for a in acc {
        s += a;
    }
    s
}

fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut s = ca.remainder().iter().zip(cb.remainder()).fold(S::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    for a in acc {
        s += a;
    }
    s
}

/// Gradients from one backward sweep.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
    param_of_node: Vec<Option<ParamId>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient w.r.t. an input or parameter node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for (g, id) in self.grads.iter().zip(&self.param_of_node) {
            if let (Some(g), Some(id)) = (g, id) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}
