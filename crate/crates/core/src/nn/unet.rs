//! Convolutional encoder-decoder with skip connections.

use super::layers::{
    concat_channels, dropout, dropout_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    split_channels, upsample2, upsample2_backward, BatchNorm2d, BnCache, Builder, Conv2d, Ctx,
    Linear,
};
use super::network::{check_finite, gap, gap_backward};
use super::params::{Grads, Group, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

const DROPOUT: f64 = 0.1;

/// 3x3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub(crate) struct CbrCache {
    x: Tensor,
    bn: BnCache,
    y: Tensor,
}

impl ConvBnRelu {
    pub fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self::in_group(bld, name, Group::Backbone, cin, cout)
    }

    pub fn in_group(bld: &mut Builder, name: &str, group: Group, cin: usize, cout: usize) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(bld, &format!("{name}.conv"), group, cin, cout, 3, false),
            bn: BatchNorm2d::new(bld, &format!("{name}.bn"), group, cout),
        }
    }

    pub fn cout(&self) -> usize {
        self.conv.cout
    }

    pub fn forward(&self, s: &ParamStore, x: Tensor, ctx: &mut Ctx) -> (Tensor, CbrCache) {
        let z = self.conv.forward(s, &x);
        let (z, bn) = self.bn.forward(s, &z, ctx);
        let y = relu(&z);
        (y.clone(), CbrCache { x, bn, y })
    }

    pub fn backward(&self, s: &ParamStore, c: &CbrCache, dy: &Tensor, g: &mut Grads) -> Tensor {
        let dz = relu_backward(&c.y, dy);
        let dz = self.bn.backward(s, &c.bn, &dz, g);
        self.conv.backward(s, &c.x, &dz, g)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl DoubleConv {
    fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        DoubleConv {
            a: ConvBnRelu::new(bld, &format!("{name}.0"), cin, cout),
            b: ConvBnRelu::new(bld, &format!("{name}.1"), cout, cout),
        }
    }

    fn forward(&self, s: &ParamStore, x: Tensor, ctx: &mut Ctx) -> (Tensor, [CbrCache; 2]) {
        let (h, ca) = self.a.forward(s, x, ctx);
        let (y, cb) = self.b.forward(s, h, ctx);
        (y, [ca, cb])
    }

    fn backward(&self, s: &ParamStore, c: &[CbrCache; 2], dy: &Tensor, g: &mut Grads) -> Tensor {
        let dh = self.b.backward(s, &c[1], dy, g);
        self.a.backward(s, &c[0], &dh, g)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvUnet {
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    seg_head: Conv2d,
    cls_head: Linear,
}

pub(crate) struct UnetCache {
    enc: Vec<[CbrCache; 2]>,
    pools: Vec<(Vec<u8>, Vec<usize>)>,
    drop_mask: Option<Vec<f64>>,
    bottleneck_shape: Vec<usize>,
    pooled: Tensor,
    dec: Vec<[CbrCache; 2]>,
    up_in_shapes: Vec<Vec<usize>>,
    head_in: Tensor,
}

impl ConvUnet {
    pub fn new(bld: &mut Builder, width: usize, depth: usize, c_seg: usize, k_cls: usize) -> Self {
        let ch = |i: usize| width << i;
        let enc = (0..depth)
            .map(|i| {
                let cin = if i == 0 { 1 } else { ch(i - 1) };
                DoubleConv::new(bld, &format!("enc{i}"), cin, ch(i))
            })
            .collect();
        let dec = (0..depth - 1)
            .rev()
            .map(|i| DoubleConv::new(bld, &format!("dec{i}"), ch(i + 1) + ch(i), ch(i)))
            .collect();
        let seg_head = Conv2d::new(bld, "seg_head", Group::SegHead, width, c_seg, 1, true);
        let cls_head = Linear::new(bld, "cls_head", Group::ClsHead, ch(depth - 1), k_cls);
        ConvUnet {
            enc,
            dec,
            seg_head,
            cls_head,
        }
    }

    pub fn forward(&self, s: &ParamStore, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Tensor, UnetCache)> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut enc_c = Vec::with_capacity(self.enc.len());
        let mut pools = Vec::new();
        let mut h = x.clone();
        for (i, blk) in self.enc.iter().enumerate() {
            if i > 0 {
                let (p, idx) = maxpool2(&h);
                pools.push((idx, h.shape().to_vec()));
                h = p;
            }
            let (y, c) = blk.forward(s, h, ctx);
            check_finite(&y, &format!("enc{i}"))?;
            enc_c.push(c);
            skips.push(y.clone());
            h = y;
        }
        let (bott, drop_mask) = dropout(&h, DROPOUT, ctx);
        let pooled = gap(&bott);
        let cls = self.cls_head.forward(s, &pooled);
        check_finite(&cls, "cls_head")?;

        let mut cur = bott.clone();
        let mut dec_c = Vec::with_capacity(self.dec.len());
        let mut up_in_shapes = Vec::with_capacity(self.dec.len());
        let depth = self.enc.len();
        for (j, blk) in self.dec.iter().enumerate() {
            let level = depth - 2 - j;
            up_in_shapes.push(cur.shape().to_vec());
            let cat = concat_channels(&upsample2(&cur), &skips[level]);
            let (y, c) = blk.forward(s, cat, ctx);
            check_finite(&y, &format!("dec{level}"))?;
            dec_c.push(c);
            cur = y;
        }
        let seg = self.seg_head.forward(s, &cur);
        check_finite(&seg, "seg_head")?;
        Ok((
            seg,
            cls,
            UnetCache {
                enc: enc_c,
                pools,
                drop_mask,
                bottleneck_shape: bott.shape().to_vec(),
                pooled,
                dec: dec_c,
                up_in_shapes,
                head_in: cur,
            },
        ))
    }

    pub fn backward(&self, s: &ParamStore, c: &UnetCache, dseg: &Tensor, dcls: &Tensor, g: &mut Grads) {
        let depth = self.enc.len();
        let mut dcur = self.seg_head.backward(s, &c.head_in, dseg, g);
        let mut dskips: Vec<Option<Tensor>> = vec![None; depth];
        for (j, blk) in self.dec.iter().enumerate().rev() {
            let level = depth - 2 - j;
            let dcat = blk.backward(s, &c.dec[j], &dcur, g);
            let up_c = c.up_in_shapes[j][1];
            let (dup, dskip) = split_channels(&dcat, up_c);
            dskips[level] = Some(dskip);
            dcur = upsample2_backward(&dup, &c.up_in_shapes[j]);
        }
        let dpooled = self.cls_head.backward(s, &c.pooled, dcls, g);
        dcur.add_assign(&gap_backward(&dpooled, &c.bottleneck_shape));
        let mut dh = dropout_backward(&c.drop_mask, dcur);
        for i in (0..depth).rev() {
            if let Some(ds) = &dskips[i] {
                dh.add_assign(ds);
            }
            dh = self.enc[i].backward(s, &c.enc[i], &dh, g);
            if i > 0 {
                let (idx, shape) = &c.pools[i - 1];
                dh = maxpool2_backward(idx, &dh, shape);
            }
        }
    }
}
