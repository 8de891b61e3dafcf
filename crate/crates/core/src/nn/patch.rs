//! Patch-embedding self-attention encoder with a light upsampling decoder.
//!
//! Tokens are non-overlapping `PATCH x PATCH` patches carrying a fixed 2-D
//! sinusoidal position code, so one network accepts any input size divisible
//! by the patch size. The decoder upsamples the token grid twice and sees the
//! raw image again at full resolution before the segmentation head. The
//! decoder is task specific and sits in the segmentation head's parameter
//! group; only the patch embedding and attention blocks form the backbone.

use super::layers::{
    concat_channels, dropout, dropout_backward, gelu, gelu_backward, split_channels, upsample2,
    upsample2_backward, Attention, AttnCache, Builder, Conv2d, Ctx, LayerNorm, Linear, LnCache,
};
use super::network::check_finite;
use super::params::{Grads, Group, ParamStore};
use super::unet::{CbrCache, ConvBnRelu};
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) const PATCH: usize = 4;
const HEADS: usize = 4;
const DROPOUT: f64 = 0.1;

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache {
    n1: LnCache,
    attn: AttnCache,
    n2: LnCache,
    n2_out: Tensor,
    fc1_out: Tensor,
    act: Tensor,
}

impl Block {
    fn new(bld: &mut Builder, name: &str, dim: usize) -> Self {
        let g = Group::Backbone;
        Block {
            norm1: LayerNorm::new(bld, &format!("{name}.norm1"), g, dim),
            attn: Attention::new(bld, &format!("{name}.attn"), g, dim, HEADS),
            norm2: LayerNorm::new(bld, &format!("{name}.norm2"), g, dim),
            fc1: Linear::new(bld, &format!("{name}.mlp.fc1"), g, dim, 2 * dim),
            fc2: Linear::new(bld, &format!("{name}.mlp.fc2"), g, 2 * dim, dim),
        }
    }

    fn forward(&self, s: &ParamStore, x: Tensor, batch: usize) -> (Tensor, BlockCache) {
        let (n1_out, n1) = self.norm1.forward(s, &x);
        let (a, attn) = self.attn.forward(s, &n1_out, batch);
        let mut h = x;
        h.add_assign(&a);
        let (n2_out, n2) = self.norm2.forward(s, &h);
        let fc1_out = self.fc1.forward(s, &n2_out);
        let act = gelu(&fc1_out);
        let m = self.fc2.forward(s, &act);
        h.add_assign(&m);
        (
            h,
            BlockCache {
                n1,
                attn,
                n2,
                n2_out,
                fc1_out,
                act,
            },
        )
    }

    fn backward(&self, s: &ParamStore, c: &BlockCache, dy: Tensor, batch: usize, g: &mut Grads) -> Tensor {
        let dact = self.fc2.backward(s, &c.act, &dy, g);
        let dfc1 = gelu_backward(&c.fc1_out, &dact);
        let dn2 = self.fc1.backward(s, &c.n2_out, &dfc1, g);
        let mut dh = dy;
        dh.add_assign(&self.norm2.backward(s, &c.n2, &dn2, g));
        let dn1 = self.attn.backward(s, &c.attn, &dh, batch, g);
        dh.add_assign(&self.norm1.backward(s, &c.n1, &dn1, g));
        dh
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PatchAttention {
    dim: usize,
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dec1: ConvBnRelu,
    dec2: ConvBnRelu,
    dec3: ConvBnRelu,
    seg_head: Conv2d,
    cls_head: Linear,
}

pub(crate) struct PatchCache {
    batch: usize,
    grid: (usize, usize),
    patches: Tensor,
    blocks: Vec<BlockCache>,
    norm: LnCache,
    drop_mask: Option<Vec<f64>>,
    pooled: Tensor,
    dec1: CbrCache,
    up1_in: Vec<usize>,
    dec2: CbrCache,
    up2_in: Vec<usize>,
    dec3: CbrCache,
    head_in: Tensor,
}

/// Fixed 2-D sine/cosine position code `[gh * gw, dim]`; half the channels
/// encode the row, half the column.
fn position_code(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let t = y * gw + x;
            for (off, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    out[t * dim + off + 2 * i] = (pos as f64 * freq).sin();
                    out[t * dim + off + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    out
}

fn patchify(x: &Tensor) -> Tensor {
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let (gh, gw) = (h / PATCH, w / PATCH);
    let pp = PATCH * PATCH;
    let mut out = Tensor::zeros(&[b * gh * gw, pp]);
    let od = out.data_mut();
    for bi in 0..b {
        let img = &x.data()[bi * h * w..(bi + 1) * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                let t = (bi * gh + gy) * gw + gx;
                for py in 0..PATCH {
                    let src = &img[(gy * PATCH + py) * w + gx * PATCH..][..PATCH];
                    od[t * pp + py * PATCH..][..PATCH].copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn tokens_to_map(f: &Tensor, batch: usize, gh: usize, gw: usize) -> Tensor {
    let d = f.dim(1);
    let t = gh * gw;
    let mut m = Tensor::zeros(&[batch, d, gh, gw]);
    let md = m.data_mut();
    for b in 0..batch {
        for ti in 0..t {
            for c in 0..d {
                md[(b * d + c) * t + ti] = f.data()[(b * t + ti) * d + c];
            }
        }
    }
    m
}

fn map_to_tokens(m: &Tensor) -> Tensor {
    let (batch, d, t) = (m.dim(0), m.dim(1), m.dim(2) * m.dim(3));
    let mut f = Tensor::zeros(&[batch * t, d]);
    let fd = f.data_mut();
    for b in 0..batch {
        for ti in 0..t {
            for c in 0..d {
                fd[(b * t + ti) * d + c] = m.data()[(b * d + c) * t + ti];
            }
        }
    }
    f
}

impl PatchAttention {
    pub fn new(bld: &mut Builder, width: usize, depth: usize, c_seg: usize, k_cls: usize) -> Self {
        let dim = 3 * width;
        let (d1, d3) = (3 * width / 2, 3 * width / 4);
        let embed = Linear::new(bld, "patch_embed", Group::Backbone, PATCH * PATCH, dim);
        let blocks = (0..depth)
            .map(|i| Block::new(bld, &format!("blocks.{i}"), dim))
            .collect();
        let norm = LayerNorm::new(bld, "norm", Group::Backbone, dim);
        PatchAttention {
            dim,
            embed,
            blocks,
            norm,
            dec1: ConvBnRelu::in_group(bld, "seg_head.decoder.0", Group::SegHead, dim, d1),
            dec2: ConvBnRelu::in_group(bld, "seg_head.decoder.1", Group::SegHead, d1, d1),
            dec3: ConvBnRelu::in_group(bld, "seg_head.decoder.2", Group::SegHead, d1 + 1, d3),
            seg_head: Conv2d::new(bld, "seg_head", Group::SegHead, d3, c_seg, 1, true),
            cls_head: Linear::new(bld, "cls_head", Group::ClsHead, dim, k_cls),
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Tensor, PatchCache)> {
        let batch = x.dim(0);
        let (gh, gw) = (x.dim(2) / PATCH, x.dim(3) / PATCH);
        let t = gh * gw;
        let patches = patchify(x);
        let mut h = self.embed.forward(s, &patches);
        let pos = position_code(gh, gw, self.dim);
        for row in h.data_mut().chunks_mut(t * self.dim) {
            for (v, p) in row.iter_mut().zip(&pos) {
                *v += p;
            }
        }
        check_finite(&h, "patch_embed")?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, c) = blk.forward(s, h, batch);
            check_finite(&y, &format!("blocks.{i}"))?;
            blocks.push(c);
            h = y;
        }
        let (f, norm) = self.norm.forward(s, &h);
        let (f, drop_mask) = dropout(&f, DROPOUT, ctx);

        let mut pooled = Tensor::zeros(&[batch, self.dim]);
        for b in 0..batch {
            for ti in 0..t {
                let row = &f.data()[(b * t + ti) * self.dim..][..self.dim];
                for (p, v) in pooled.data_mut()[b * self.dim..][..self.dim].iter_mut().zip(row) {
                    *p += v / t as f64;
                }
            }
        }
        let cls = self.cls_head.forward(s, &pooled);
        check_finite(&cls, "cls_head")?;

        let map = tokens_to_map(&f, batch, gh, gw);
        let (y1, dec1) = self.dec1.forward(s, map, ctx);
        let up1_in = y1.shape().to_vec();
        let (y2, dec2) = self.dec2.forward(s, upsample2(&y1), ctx);
        let up2_in = y2.shape().to_vec();
        let cat = concat_channels(&upsample2(&y2), x);
        let (y3, dec3) = self.dec3.forward(s, cat, ctx);
        check_finite(&y3, "decoder")?;
        let seg = self.seg_head.forward(s, &y3);
        check_finite(&seg, "seg_head")?;
        Ok((
            seg,
            cls,
            PatchCache {
                batch,
                grid: (gh, gw),
                patches,
                blocks,
                norm,
                drop_mask,
                pooled,
                dec1,
                up1_in,
                dec2,
                up2_in,
                dec3,
                head_in: y3,
            },
        ))
    }

    pub fn backward(&self, s: &ParamStore, c: &PatchCache, dseg: &Tensor, dcls: &Tensor, g: &mut Grads) {
        let batch = c.batch;
        let (gh, gw) = c.grid;
        let t = gh * gw;
        let dy3 = self.seg_head.backward(s, &c.head_in, dseg, g);
        let dcat = self.dec3.backward(s, &c.dec3, &dy3, g);
        let d1 = self.dec3_in_up_channels();
        let (dup2, _dimage) = split_channels(&dcat, d1);
        let dy2 = upsample2_backward(&dup2, &c.up2_in);
        let dy1_up = self.dec2.backward(s, &c.dec2, &dy2, g);
        let dy1 = upsample2_backward(&dy1_up, &c.up1_in);
        let dmap = self.dec1.backward(s, &c.dec1, &dy1, g);
        let mut df = map_to_tokens(&dmap);

        let dpooled = self.cls_head.backward(s, &c.pooled, dcls, g);
        for b in 0..batch {
            let dp = &dpooled.data()[b * self.dim..][..self.dim];
            for ti in 0..t {
                for (v, d) in df.data_mut()[(b * t + ti) * self.dim..][..self.dim].iter_mut().zip(dp) {
                    *v += d / t as f64;
                }
            }
        }
        let df = dropout_backward(&c.drop_mask, df);
        let mut dh = self.norm.backward(s, &c.norm, &df, g);
        for (blk, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            dh = blk.backward(s, bc, dh, batch, g);
        }
        self.embed.backward(s, &c.patches, &dh, g);
    }

    fn dec3_in_up_channels(&self) -> usize {
        self.dec2.cout()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_map_round_trip() {
        let f = Tensor::from_vec(&[8, 3], (0..24).map(f64::from).collect()).unwrap();
        let m = tokens_to_map(&f, 2, 2, 2);
        assert_eq!(map_to_tokens(&m), f);
    }

    #[test]
    fn patchify_layout() {
        let x = Tensor::from_vec(&[1, 1, 4, 8], (0..32).map(f64::from).collect()).unwrap();
        let p = patchify(&x);
        assert_eq!(p.shape(), &[2, 16]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p.data()[4..8], &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(p.data()[16], 4.0);
    }
}
