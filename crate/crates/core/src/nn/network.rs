use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Builder, Ctx, Mode, StatUpdate};
use super::params::{Grads, Group, Kind, ParamStore};
use super::patch::{PatchAttention, PatchCache, PATCH};
use super::unet::{ConvUnet, UnetCache};
use crate::error::{Error, Result};
use crate::losses::OutputGrad;
use crate::tensor::Tensor;
use crate::types::{ClsLogits, ImageBatch, SegLogits};

/// Default segmentation class count: 14 structures plus background.
pub const DEFAULT_SEG_CLASSES: usize = 15;
/// Default number of multi-label categories.
pub const DEFAULT_CLS_LABELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// Convolutional encoder-decoder with skip connections.
    ConvUnet,
    /// Patch-token self-attention encoder with an upsampling decoder.
    PatchAttention,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::ConvUnet => "conv_unet",
            BackboneKind::PatchAttention => "patch_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv_unet" => Some(BackboneKind::ConvUnet),
            "patch_attention" => Some(BackboneKind::PatchAttention),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub width: usize,
    /// Encoder stages for `conv_unet`, transformer blocks for
    /// `patch_attention`.
    pub depth: usize,
    pub c_seg: usize,
    pub k_cls: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, width: usize, depth: usize) -> Self {
        BackboneSpec {
            kind,
            width,
            depth,
            c_seg: DEFAULT_SEG_CLASSES,
            k_cls: DEFAULT_CLS_LABELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 {
            return Err(Error::Invalid(format!("width {} < 8", self.width)));
        }
        if !(2..=5).contains(&self.depth) {
            return Err(Error::Invalid(format!("depth {} outside [2, 5]", self.depth)));
        }
        if self.kind == BackboneKind::PatchAttention && self.width % 4 != 0 {
            return Err(Error::Invalid(format!(
                "patch_attention width {} must be a multiple of 4",
                self.width
            )));
        }
        if !(2..=256).contains(&self.c_seg) || self.k_cls == 0 {
            return Err(Error::Invalid(format!(
                "class counts c_seg={} k_cls={}",
                self.c_seg, self.k_cls
            )));
        }
        Ok(())
    }

    /// Total spatial downsampling between input and deepest features.
    pub fn downsample_factor(&self) -> usize {
        match self.kind {
            BackboneKind::ConvUnet => 1 << (self.depth - 1),
            BackboneKind::PatchAttention => PATCH,
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by {f} for {}",
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Segmentation logits plus per-image label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadOutput {
    pub seg: SegLogits,
    pub cls: ClsLogits,
}

#[derive(Clone, Debug)]
enum Arch {
    Unet(ConvUnet),
    Patch(PatchAttention),
}

enum ArchCache {
    Unet(UnetCache),
    Patch(PatchCache),
}

/// Result of a forward pass: outputs plus whatever the backward pass and the
/// running-statistic update need.
pub struct ForwardPass {
    pub output: DualHeadOutput,
    cache: ArchCache,
    stats: Vec<StatUpdate>,
}

impl ForwardPass {
    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stats
    }
}

/// Partition of parameter names into backbone and head groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub backbone: Vec<String>,
    pub heads: Vec<String>,
}

/// A two-headed network: architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: BackboneSpec,
    arch: Arch,
    store: ParamStore,
}

pub(crate) fn check_finite(t: &Tensor, layer: &str) -> Result<()> {
    let per = t.len() / t.dim(0).max(1);
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("activation of layer {layer}"),
            batch: pos / per.max(1),
        });
    }
    Ok(())
}

/// Global average pool `[B, C, H, W] -> [B, C]`.
pub(crate) fn gap(x: &Tensor) -> Tensor {
    let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_vec(&[b, c], data).expect("b * c planes")
}

pub(crate) fn gap_backward(d: &Tensor, shape: &[usize]) -> Tensor {
    let hw = shape[2] * shape[3];
    let mut out = Tensor::zeros(shape);
    for (plane, &g) in out.data_mut().chunks_mut(hw).zip(d.data()) {
        plane.fill(g / hw as f64);
    }
    out
}

impl Network {
    /// Builds a network with weights drawn deterministically from `seed`.
    pub fn build(spec: BackboneSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let arch = match spec.kind {
            BackboneKind::ConvUnet => Arch::Unet(ConvUnet::new(&mut bld, spec.width, spec.depth, spec.c_seg, spec.k_cls)),
            BackboneKind::PatchAttention => {
                Arch::Patch(PatchAttention::new(&mut bld, spec.width, spec.depth, spec.c_seg, spec.k_cls))
            }
        };
        Ok(Network { spec, arch, store })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Swaps in a parameter set with identical layout.
    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        self.store.check_compatible(&store)?;
        self.store = store;
        Ok(())
    }

    /// Forward pass returning only the outputs.
    pub fn forward(&self, x: &ImageBatch, mode: Mode) -> Result<DualHeadOutput> {
        Ok(self.forward_pass(x, mode)?.output)
    }

    pub fn forward_pass(&self, x: &ImageBatch, mode: Mode) -> Result<ForwardPass> {
        self.forward_with(&self.store, x, mode)
    }

    /// Runs this architecture with an external parameter set of the same
    /// layout (used by the averaged teacher).
    pub fn forward_with(&self, store: &ParamStore, x: &ImageBatch, mode: Mode) -> Result<ForwardPass> {
        self.spec.check_input(x.height(), x.width())?;
        let mut ctx = Ctx::new(mode);
        let (seg, cls, cache) = match &self.arch {
            Arch::Unet(n) => {
                let (s, c, k) = n.forward(store, x.tensor(), &mut ctx)?;
                (s, c, ArchCache::Unet(k))
            }
            Arch::Patch(n) => {
                let (s, c, k) = n.forward(store, x.tensor(), &mut ctx)?;
                (s, c, ArchCache::Patch(k))
            }
        };
        Ok(ForwardPass {
            output: DualHeadOutput {
                seg: SegLogits::new(seg)?,
                cls: ClsLogits::new(cls)?,
            },
            cache,
            stats: ctx.stats,
        })
    }

    /// Accumulates parameter gradients of a scalar loss given its gradient at
    /// the two heads' logits.
    pub fn backward(&self, pass: &ForwardPass, grad: &OutputGrad, grads: &mut Grads) {
        match (&self.arch, &pass.cache) {
            (Arch::Unet(n), ArchCache::Unet(c)) => n.backward(&self.store, c, &grad.seg, &grad.cls, grads),
            (Arch::Patch(n), ArchCache::Patch(c)) => n.backward(&self.store, c, &grad.seg, &grad.cls, grads),
            _ => unreachable!("forward pass produced by a different architecture"),
        }
    }

    /// Folds a training-mode pass's batch statistics into the running
    /// statistics.
    pub fn apply_stats(&mut self, pass: &ForwardPass) {
        for s in &pass.stats {
            s.apply(&mut self.store);
        }
    }

    pub fn param_groups(&self) -> ParamGroups {
        let mut g = ParamGroups {
            backbone: Vec::new(),
            heads: Vec::new(),
        };
        for p in self.store.iter().filter(|p| p.kind == Kind::Learnable) {
            if p.group == Group::Backbone {
                g.backbone.push(p.name.clone());
            } else {
                g.heads.push(p.name.clone());
            }
        }
        g
    }
}
