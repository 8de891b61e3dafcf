//! Layer kernels with hand-written backward passes.
//!
//! Forward functions are pure in the parameters; anything the backward pass
//! needs is returned as a cache value owned by the caller, so several
//! forwards of one network can be in flight before their backwards run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{normal_tensor, Grads, Group, Kind, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const LN_EPS: f64 = 1e-5;

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers and active dropout driven
    /// by the given seed.
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub(crate) mean_id: ParamId,
    pub(crate) var_id: ParamId,
    pub(crate) mean: Vec<f64>,
    pub(crate) var_unbiased: Vec<f64>,
}

impl StatUpdate {
    pub(crate) fn apply(&self, store: &mut ParamStore) {
        for (r, m) in store.get_mut(self.mean_id).data_mut().iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store
            .get_mut(self.var_id)
            .data_mut()
            .iter_mut()
            .zip(&self.var_unbiased)
        {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

pub(crate) struct Ctx {
    pub train: bool,
    rng: Option<ChaCha8Rng>,
    pub stats: Vec<StatUpdate>,
}

impl Ctx {
    pub fn new(mode: Mode) -> Self {
        match mode {
            Mode::Train { seed } => Ctx {
                train: true,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
                stats: Vec::new(),
            },
            Mode::Eval => Ctx {
                train: false,
                rng: None,
                stats: Vec::new(),
            },
        }
    }
}

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, group: Group, shape: &[usize], std: f64) -> ParamId {
        let t = normal_tensor(shape, std, self.rng);
        self.store.add(name, group, Kind::Learnable, t)
    }

    fn constant(&mut self, name: String, group: Group, kind: Kind, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, group, kind, Tensor::full(shape, v))
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let out = &mut row[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx_out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[iy as usize * w + sx0..iy as usize * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&row[oy * w + x0..oy * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub(crate) struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(bld: &mut Builder, name: &str, group: Group, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = bld.normal(format!("{name}.weight"), group, &[cout, cin, k, k], std);
        let b = bias.then(|| bld.constant(format!("{name}.bias"), group, Kind::Learnable, &[cout], 0.0));
        Conv2d { w, b, cin, cout, k }
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        let (bsz, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        debug_assert_eq!(x.dim(1), self.cin);
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(&[bsz, self.cout, h, w]);
        let wt = s.get(self.w).data();
        let mut cols = if self.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        for b in 0..bsz {
            let xb = &x.data()[b * self.cin * hw..(b + 1) * self.cin * hw];
            let src: &[f64] = if self.k == 1 {
                xb
            } else {
                im2col(xb, self.cin, h, w, self.k, &mut cols);
                &cols
            };
            let yb = &mut y.data_mut()[b * self.cout * hw..(b + 1) * self.cout * hw];
            gemm(self.cout, kk, hw, wt, false, src, false, yb, false);
            if let Some(bid) = self.b {
                for (o, &bv) in s.get(bid).data().iter().enumerate() {
                    yb[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        y
    }

    pub fn backward(&self, s: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Grads) -> Tensor {
        let (bsz, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let wt = s.get(self.w).data();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = if self.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        let mut dcols = vec![0.0; kk * hw];
        for b in 0..bsz {
            let xb = &x.data()[b * self.cin * hw..(b + 1) * self.cin * hw];
            let dyb = &dy.data()[b * self.cout * hw..(b + 1) * self.cout * hw];
            let src: &[f64] = if self.k == 1 {
                xb
            } else {
                im2col(xb, self.cin, h, w, self.k, &mut cols);
                &cols
            };
            gemm(self.cout, hw, kk, dyb, false, src, true, g.get_mut(self.w).data_mut(), true);
            if let Some(bid) = self.b {
                let gb = g.get_mut(bid).data_mut();
                for o in 0..self.cout {
                    gb[o] += dyb[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            let dxb = &mut dx.data_mut()[b * self.cin * hw..(b + 1) * self.cin * hw];
            if self.k == 1 {
                gemm(kk, self.cout, hw, wt, true, dyb, false, dxb, false);
            } else {
                gemm(kk, self.cout, hw, wt, true, dyb, false, &mut dcols, false);
                col2im(&dcols, self.cin, h, w, self.k, dxb);
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(bld: &mut Builder, name: &str, group: Group, c: usize) -> Self {
        BatchNorm2d {
            gamma: bld.constant(format!("{name}.weight"), group, Kind::Learnable, &[c], 1.0),
            beta: bld.constant(format!("{name}.bias"), group, Kind::Learnable, &[c], 0.0),
            mean: bld.constant(format!("{name}.running_mean"), group, Kind::Buffer, &[c], 0.0),
            var: bld.constant(format!("{name}.running_var"), group, Kind::Buffer, &[c], 1.0),
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> (Tensor, BnCache) {
        let (bsz, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        let n = (bsz * hw) as f64;
        let xd = x.data();
        let (mean, var): (Vec<f64>, Vec<f64>) = if ctx.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut sum = 0.0;
                for b in 0..bsz {
                    sum += xd[(b * c + ci) * hw..(b * c + ci + 1) * hw].iter().sum::<f64>();
                }
                let m = sum / n;
                let mut sq = 0.0;
                for b in 0..bsz {
                    sq += xd[(b * c + ci) * hw..(b * c + ci + 1) * hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ci] = m;
                var[ci] = sq / n;
            }
            let unbiased = var
                .iter()
                .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                .collect();
            ctx.stats.push(StatUpdate {
                mean_id: self.mean,
                var_id: self.var,
                mean: mean.clone(),
                var_unbiased: unbiased,
            });
            (mean, var)
        } else {
            (s.get(self.mean).data().to_vec(), s.get(self.var).data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = s.get(self.gamma).data();
        let beta = s.get(self.beta).data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..bsz {
            for ci in 0..c {
                let r = (b * c + ci) * hw..(b * c + ci + 1) * hw;
                let xs = &xd[r.clone()];
                let xh = &mut xhat.data_mut()[r.clone()];
                for (o, &v) in xh.iter_mut().zip(xs) {
                    *o = (v - mean[ci]) * inv_std[ci];
                }
                let ys = &mut y.data_mut()[r.clone()];
                for (o, &v) in ys.iter_mut().zip(&xhat.data()[r]) {
                    *o = gamma[ci] * v + beta[ci];
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train: ctx.train,
            },
        )
    }

    pub fn backward(&self, s: &ParamStore, cache: &BnCache, dy: &Tensor, g: &mut Grads) -> Tensor {
        let (bsz, c, hw) = (dy.dim(0), dy.dim(1), dy.dim(2) * dy.dim(3));
        let n = (bsz * hw) as f64;
        let gamma = s.get(self.gamma).data();
        let dyd = dy.data();
        let xh = cache.xhat.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xh = vec![0.0; c];
        for b in 0..bsz {
            for ci in 0..c {
                let r = (b * c + ci) * hw..(b * c + ci + 1) * hw;
                for (d, x) in dyd[r.clone()].iter().zip(&xh[r]) {
                    sum_dy[ci] += d;
                    sum_dy_xh[ci] += d * x;
                }
            }
        }
        {
            let gg = g.get_mut(self.gamma).data_mut();
            for ci in 0..c {
                gg[ci] += sum_dy_xh[ci];
            }
        }
        {
            let gb = g.get_mut(self.beta).data_mut();
            for ci in 0..c {
                gb[ci] += sum_dy[ci];
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        for b in 0..bsz {
            for ci in 0..c {
                let r = (b * c + ci) * hw..(b * c + ci + 1) * hw;
                let k = gamma[ci] * cache.inv_std[ci];
                if cache.train {
                    let (m1, m2) = (sum_dy[ci] / n, sum_dy_xh[ci] / n);
                    for ((o, d), x) in dxd[r.clone()].iter_mut().zip(&dyd[r.clone()]).zip(&xh[r]) {
                        *o = k * (d - m1 - x * m2);
                    }
                } else {
                    for (o, d) in dxd[r.clone()].iter_mut().zip(&dyd[r]) {
                        *o = k * d;
                    }
                }
            }
        }
        dx
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward of ReLU given its output.
pub(crate) fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &d)| if o > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

pub(crate) fn maxpool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut idx = vec![0u8; b * c * ho * wo];
    let xd = x.data();
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let cands = [
                    src[2 * oy * w + 2 * ox],
                    src[2 * oy * w + 2 * ox + 1],
                    src[(2 * oy + 1) * w + 2 * ox],
                    src[(2 * oy + 1) * w + 2 * ox + 1],
                ];
                let mut best = 0;
                for k in 1..4 {
                    if cands[k] > cands[best] {
                        best = k;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                y.data_mut()[o] = cands[best];
                idx[o] = best as u8;
            }
        }
    }
    (y, idx)
}

pub(crate) fn maxpool2_backward(idx: &[u8], dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (dy.dim(2), dy.dim(3));
    let mut dx = Tensor::zeros(in_shape);
    let planes = in_shape[0] * in_shape[1];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = p * ho * wo + oy * wo + ox;
                let k = idx[o] as usize;
                let (iy, ix) = (2 * oy + k / 2, 2 * ox + k % 2);
                dx.data_mut()[p * h * w + iy * w + ix] += dy.data()[o];
            }
        }
    }
    dx
}

/// Source taps of 2x bilinear upsampling with half-pixel centers.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut yd[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward(dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    let planes = in_shape[0] * in_shape[1];
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for p in 0..planes {
        let src = &dyd[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dxd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let d = src[oy * wo + ox];
                dst[y0 * w + x0] += wy0 * wx0 * d;
                dst[y0 * w + x1] += wy0 * wx1 * d;
                dst[y1 * w + x0] += wy1 * wx0 * d;
                dst[y1 * w + x1] += wy1 * wx1 * d;
            }
        }
    }
    dx
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (bsz, ca, cb, hw) = (a.dim(0), a.dim(1), b.dim(1), a.dim(2) * a.dim(3));
    let mut out = Tensor::zeros(&[bsz, ca + cb, a.dim(2), a.dim(3)]);
    let od = out.data_mut();
    for i in 0..bsz {
        let base = i * (ca + cb) * hw;
        od[base..base + ca * hw].copy_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        od[base + ca * hw..base + (ca + cb) * hw]
            .copy_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    out
}

pub(crate) fn split_channels(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (bsz, c, h, w) = (d.dim(0), d.dim(1), d.dim(2), d.dim(3));
    let (cb, hw) = (c - ca, h * w);
    let mut a = Tensor::zeros(&[bsz, ca, h, w]);
    let mut b = Tensor::zeros(&[bsz, cb, h, w]);
    for i in 0..bsz {
        let base = i * c * hw;
        a.data_mut()[i * ca * hw..(i + 1) * ca * hw].copy_from_slice(&d.data()[base..base + ca * hw]);
        b.data_mut()[i * cb * hw..(i + 1) * cb * hw]
            .copy_from_slice(&d.data()[base + ca * hw..base + c * hw]);
    }
    (a, b)
}

/// Inverted dropout; returns the scaled keep mask in training mode.
pub(crate) fn dropout(x: &Tensor, p: f64, ctx: &mut Ctx) -> (Tensor, Option<Vec<f64>>) {
    let rng = match (ctx.train, ctx.rng.as_mut()) {
        (true, Some(rng)) if p > 0.0 => rng,
        _ => return (x.clone(), None),
    };
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    (Tensor::from_vec(x.shape(), data).expect("same shape"), Some(mask))
}

pub(crate) fn dropout_backward(mask: &Option<Vec<f64>>, dy: Tensor) -> Tensor {
    match mask {
        None => dy,
        Some(m) => {
            let mut dy = dy;
            for (d, k) in dy.data_mut().iter_mut().zip(m) {
                *d *= k;
            }
            dy
        }
    }
}

/// Affine map on the last axis of an `[N, in]` tensor.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(bld: &mut Builder, name: &str, group: Group, din: usize, dout: usize) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Linear {
            w: bld.normal(format!("{name}.weight"), group, &[dout, din], std),
            b: bld.constant(format!("{name}.bias"), group, Kind::Learnable, &[dout], 0.0),
            din,
            dout,
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        let n = x.len() / self.din;
        let mut y = Tensor::zeros(&[n, self.dout]);
        gemm(n, self.din, self.dout, x.data(), false, s.get(self.w).data(), true, y.data_mut(), false);
        let bias = s.get(self.b).data();
        for row in y.data_mut().chunks_mut(self.dout) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&self, s: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Grads) -> Tensor {
        let n = x.len() / self.din;
        gemm(self.dout, n, self.din, dy.data(), true, x.data(), false, g.get_mut(self.w).data_mut(), true);
        {
            let gb = g.get_mut(self.b).data_mut();
            for row in dy.data().chunks(self.dout) {
                for (a, d) in gb.iter_mut().zip(row) {
                    *a += d;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, self.din]);
        gemm(n, self.dout, self.din, dy.data(), false, s.get(self.w).data(), false, dx.data_mut(), false);
        dx
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
}

pub(crate) struct LnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(bld: &mut Builder, name: &str, group: Group, d: usize) -> Self {
        LayerNorm {
            gamma: bld.constant(format!("{name}.weight"), group, Kind::Learnable, &[d], 1.0),
            beta: bld.constant(format!("{name}.bias"), group, Kind::Learnable, &[d], 0.0),
            d,
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor) -> (Tensor, LnCache) {
        let d = self.d;
        let n = x.len() / d;
        let gamma = s.get(self.gamma).data();
        let beta = s.get(self.beta).data();
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &x.data()[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat.data_mut()[r * d + j] = xh;
                y.data_mut()[r * d + j] = gamma[j] * xh + beta[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, s: &ParamStore, cache: &LnCache, dy: &Tensor, g: &mut Grads) -> Tensor {
        let d = self.d;
        let n = dy.len() / d;
        let gamma = s.get(self.gamma).data();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dx = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let dyr = &dy.data()[r * d..(r + 1) * d];
            let xh = &cache.xhat.data()[r * d..(r + 1) * d];
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for j in 0..d {
                dgamma[j] += dyr[j] * xh[j];
                dbeta[j] += dyr[j];
                let gx = dyr[j] * gamma[j];
                s1 += gx;
                s2 += gx * xh[j];
            }
            let (m1, m2) = (s1 / d as f64, s2 / d as f64);
            for j in 0..d {
                dx.data_mut()[r * d + j] = cache.inv_std[r] * (dyr[j] * gamma[j] - m1 - xh[j] * m2);
            }
        }
        for (a, v) in g.get_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *a += v;
        }
        for (a, v) in g.get_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *a += v;
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub(crate) fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Multi-head self-attention over `[B, T, D]` token sequences stored as
/// `[B * T, D]`.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub(crate) struct AttnCache {
    x: Tensor,
    qkv: Tensor,
    probs: Vec<Vec<f64>>,
    merged: Tensor,
}

impl Attention {
    pub fn new(bld: &mut Builder, name: &str, group: Group, dim: usize, heads: usize) -> Self {
        Attention {
            qkv: Linear::new(bld, &format!("{name}.qkv"), group, dim, 3 * dim),
            proj: Linear::new(bld, &format!("{name}.proj"), group, dim, dim),
            heads,
            dim,
        }
    }

    fn gather(&self, qkv: &[f64], t: usize, b: usize, part: usize, h: usize) -> Vec<f64> {
        let (d, dh) = (self.dim, self.dim / self.heads);
        let mut out = vec![0.0; t * dh];
        for i in 0..t {
            let row = &qkv[(b * t + i) * 3 * d + part * d + h * dh..][..dh];
            out[i * dh..(i + 1) * dh].copy_from_slice(row);
        }
        out
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor, batch: usize) -> (Tensor, AttnCache) {
        let t = x.dim(0) / batch;
        let (d, dh) = (self.dim, self.dim / self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(s, x);
        let mut merged = Tensor::zeros(&[batch * t, d]);
        let mut probs = Vec::with_capacity(batch * self.heads);
        let mut scores = vec![0.0; t * t];
        let mut o = vec![0.0; t * dh];
        for b in 0..batch {
            for h in 0..self.heads {
                let q = self.gather(qkv.data(), t, b, 0, h);
                let k = self.gather(qkv.data(), t, b, 1, h);
                let v = self.gather(qkv.data(), t, b, 2, h);
                gemm(t, dh, t, &q, false, &k, true, &mut scores, false);
                for row in scores.chunks_mut(t) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                    let mut sum = 0.0;
                    for a in row.iter_mut() {
                        *a = (*a * scale - mx).exp();
                        sum += *a;
                    }
                    row.iter_mut().for_each(|a| *a /= sum);
                }
                gemm(t, t, dh, &scores, false, &v, false, &mut o, false);
                for i in 0..t {
                    merged.data_mut()[(b * t + i) * d + h * dh..][..dh]
                        .copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
                probs.push(scores.clone());
            }
        }
        let y = self.proj.forward(s, &merged);
        (
            y,
            AttnCache {
                x: x.clone(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(&self, s: &ParamStore, cache: &AttnCache, dy: &Tensor, batch: usize, g: &mut Grads) -> Tensor {
        let t = cache.x.dim(0) / batch;
        let (d, dh) = (self.dim, self.dim / self.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.proj.backward(s, &cache.merged, dy, g);
        let mut dqkv = Tensor::zeros(cache.qkv.shape());
        let mut da = vec![0.0; t * t];
        let mut dv = vec![0.0; t * dh];
        let mut dq = vec![0.0; t * dh];
        let mut dk = vec![0.0; t * dh];
        let mut dob = vec![0.0; t * dh];
        for b in 0..batch {
            for h in 0..self.heads {
                let a = &cache.probs[b * self.heads + h];
                let q = self.gather(cache.qkv.data(), t, b, 0, h);
                let k = self.gather(cache.qkv.data(), t, b, 1, h);
                let v = self.gather(cache.qkv.data(), t, b, 2, h);
                for i in 0..t {
                    dob[i * dh..(i + 1) * dh]
                        .copy_from_slice(&dmerged.data()[(b * t + i) * d + h * dh..][..dh]);
                }
                gemm(t, dh, t, &dob, false, &v, true, &mut da, false);
                gemm(t, t, dh, a, true, &dob, false, &mut dv, false);
                // softmax backward, folded with the score scale
                for i in 0..t {
                    let ar = &a[i * t..(i + 1) * t];
                    let dr = &mut da[i * t..(i + 1) * t];
                    let dot: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                    for (g, &p) in dr.iter_mut().zip(ar) {
                        *g = p * (*g - dot) * scale;
                    }
                }
                gemm(t, t, dh, &da, false, &k, false, &mut dq, false);
                gemm(t, t, dh, &da, true, &q, false, &mut dk, false);
                let dd = dqkv.data_mut();
                for i in 0..t {
                    let base = (b * t + i) * 3 * d + h * dh;
                    dd[base..base + dh].copy_from_slice(&dq[i * dh..(i + 1) * dh]);
                    dd[base + d..base + d + dh].copy_from_slice(&dk[i * dh..(i + 1) * dh]);
                    dd[base + 2 * d..base + 2 * d + dh].copy_from_slice(&dv[i * dh..(i + 1) * dh]);
                }
            }
        }
        self.qkv.backward(s, &cache.x, &dqkv, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (cin, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let c: Vec<f64> = (0..cin * k * k * h * w).map(|i| (i as f64 * 0.17).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, cin, h, w, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, cin, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7);
        let y = upsample2(&x);
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64).sin()).collect();
        let x = Tensor::from_vec(&[1, 2, 3, 4], x).unwrap();
        let dy: Vec<f64> = (0..2 * 6 * 8).map(|i| (i as f64 * 0.4).cos()).collect();
        let dy = Tensor::from_vec(&[1, 2, 6, 8], dy).unwrap();
        let y = upsample2(&x);
        let dx = upsample2_backward(&dy, x.shape());
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data(), &[0.9]);
        let dx = maxpool2_backward(&idx, &Tensor::full(&[1, 1, 1, 1], 2.0), x.shape());
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let c = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!((a2, b2), (a, b));
    }
}
