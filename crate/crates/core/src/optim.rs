//! Adaptive moment estimation with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::{Grads, Kind, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate and decoupled weight decay for one parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

impl GroupHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        GroupHyper { lr, weight_decay }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("{what} learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid(format!(
                "{what} weight decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state for one network. Buffers (running statistics) are never
/// touched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    backbone: GroupHyper,
    heads: GroupHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, backbone: GroupHyper, heads: GroupHyper) -> Result<Self> {
        backbone.validate("backbone")?;
        heads.validate("heads")?;
        let zeros = |p: &crate::nn::Param| Tensor::zeros(p.value.shape());
        Ok(AdamW {
            backbone,
            heads,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
            t: 0,
        })
    }

    /// Restores saved moments; shapes must match `store`.
    pub fn from_parts(
        store: &ParamStore,
        backbone: GroupHyper,
        heads: GroupHyper,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        t: u64,
    ) -> Result<Self> {
        let mut opt = AdamW::new(store, backbone, heads)?;
        if m.len() != opt.m.len() || v.len() != opt.v.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer moments for {} tensors, network has {}",
                m.len(),
                opt.m.len()
            )));
        }
        for ((a, b), p) in m.iter().zip(&v).zip(store.iter()) {
            if a.shape() != p.value.shape() || b.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer moment shape mismatch at {}", p.name)));
            }
        }
        opt.m = m;
        opt.v = v;
        opt.t = t;
        Ok(opt)
    }

    pub fn hyper(&self, head: bool) -> GroupHyper {
        if head {
            self.heads
        } else {
            self.backbone
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with every group's learning rate multiplied by `lr_scale`.
    ///
    /// Weight decay is applied first, `p *= 1 - lr * wd`, then the
    /// bias-corrected moment step `p -= lr / c1 * m / (sqrt(v) / sqrt(c2) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr_scale: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2_sqrt = (1.0 - BETA2.powi(t)).sqrt();
        for (i, p) in store.iter_mut().enumerate() {
            if p.kind != Kind::Learnable {
                continue;
            }
            let h = self.hyper(p.group.is_head());
            let lr = h.lr * lr_scale;
            let decay = 1.0 - lr * h.weight_decay;
            let step = lr / c1;
            let g = grads.get(i).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() / c2_sqrt + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneKind, BackboneSpec, Network};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let net = Network::build(BackboneSpec::new(BackboneKind::ConvUnet, 8, 2), 1).unwrap();
        let mut store = net.params().clone();
        let before = store.clone();
        let mut g = Grads::zeros_like(&store);
        let id = store.find("seg_head.bias").unwrap();
        g.get_mut(id).data_mut()[0] = 3.0;
        g.get_mut(id).data_mut()[1] = -0.5;
        let mut opt = AdamW::new(&store, GroupHyper::new(1e-4, 0.0), GroupHyper::new(1e-2, 0.0)).unwrap();
        opt.step(&mut store, &g, 1.0);
        let d: Vec<f64> = store
            .get(id)
            .data()
            .iter()
            .zip(before.get(id).data())
            .map(|(a, b)| a - b)
            .collect();
        assert!((d[0] + 1e-2).abs() < 1e-9);
        assert!((d[1] - 1e-2).abs() < 1e-9);
        assert_eq!(d[2], 0.0);
        let w = store.find("enc0.0.conv.weight").unwrap();
        assert_eq!(store.get(w), before.get(w));
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let net = Network::build(BackboneSpec::new(BackboneKind::ConvUnet, 8, 2), 1).unwrap();
        let mut store = net.params().clone();
        let before = store.clone();
        let mut g = Grads::zeros_like(&store);
        for i in 0..store.len() {
            g.get_mut(i).fill(0.3);
        }
        let mut opt = AdamW::new(&store, GroupHyper::new(0.0, 0.01), GroupHyper::new(0.0, 0.01)).unwrap();
        opt.step(&mut store, &g, 1.0);
        assert_eq!(store, before);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let net = Network::build(BackboneSpec::new(BackboneKind::ConvUnet, 8, 2), 1).unwrap();
        let mut store = net.params().clone();
        let id = store.find("cls_head.weight").unwrap();
        let before = store.get(id).clone();
        let g = Grads::zeros_like(&store);
        let mut opt = AdamW::new(&store, GroupHyper::new(0.0, 0.0), GroupHyper::new(0.1, 0.5)).unwrap();
        opt.step(&mut store, &g, 1.0);
        for (a, b) in store.get(id).data().iter().zip(before.data()) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_rate_rejected() {
        let store = ParamStore::default();
        assert!(AdamW::new(&store, GroupHyper::new(-1.0, 0.0), GroupHyper::new(0.1, 0.0)).is_err());
        assert!(AdamW::new(&store, GroupHyper::new(1.0, f64::NAN), GroupHyper::new(0.1, 0.0)).is_err());
    }
}
