use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmdacl::losses::OutputGrad;
use fmdacl::nn::{BackboneKind, BackboneSpec, Grads, Kind, Mode, Network};
use fmdacl::tensor::Tensor;
use fmdacl::types::ImageBatch;

fn image(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> ImageBatch {
    ImageBatch::new(Tensor::from_vec(&[b, 1, h, w], (0..b * h * w).map(|_| rng.random()).collect()).unwrap())
        .unwrap()
}

fn unet(width: usize, depth: usize) -> BackboneSpec {
    BackboneSpec::new(BackboneKind::ConvUnet, width, depth)
}

fn patch(width: usize, depth: usize) -> BackboneSpec {
    BackboneSpec::new(BackboneKind::PatchAttention, width, depth)
}

#[test]
fn same_seed_same_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = image(&mut rng, 2, 32, 32);
    for spec in [unet(8, 3), patch(8, 2)] {
        let a = Network::build(spec.clone(), 42).unwrap();
        let b = Network::build(spec.clone(), 42).unwrap();
        let c = Network::build(spec, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.forward(&x, Mode::Eval).unwrap(), b.forward(&x, Mode::Eval).unwrap());
        let t = Mode::Train { seed: 9 };
        assert_eq!(a.forward(&x, t).unwrap(), b.forward(&x, t).unwrap());
    }
}

#[test]
fn output_shapes_across_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [unet(8, 3), patch(8, 2)] {
        let net = Network::build(spec, 1).unwrap();
        for (h, w) in [(32, 32), (64, 48), (128, 128), (256, 256)] {
            let out = net.forward(&image(&mut rng, 1, h, w), Mode::Eval).unwrap();
            assert_eq!(out.seg.tensor().shape(), &[1, 15, h, w]);
            assert_eq!(out.cls.tensor().shape(), &[1, 7]);
        }
        assert!(net.forward(&image(&mut rng, 1, 30, 32), Mode::Eval).is_err());
    }
}

fn unet_param_count(width: usize, depth: usize, c_seg: usize, k_cls: usize) -> usize {
    // 3x3 convolution without bias, batch-norm scale and shift
    let cbr = |cin: usize, cout: usize| 9 * cin * cout + 2 * cout;
    let double = |cin: usize, cout: usize| cbr(cin, cout) + cbr(cout, cout);
    let ch = |i: usize| width << i;
    let enc: usize = (0..depth).map(|i| double(if i == 0 { 1 } else { ch(i - 1) }, ch(i))).sum();
    let dec: usize = (0..depth - 1).map(|i| double(ch(i + 1) + ch(i), ch(i))).sum();
    enc + dec + (width * c_seg + c_seg) + (ch(depth - 1) * k_cls + k_cls)
}

#[test]
fn unet_learnable_count_matches_closed_form() {
    let net = Network::build(unet(16, 3), 0).unwrap();
    assert_eq!(unet_param_count(16, 3, 15, 7), 118_998);
    assert_eq!(net.params().learnable_count(), 118_998);
    let net = Network::build(unet(8, 2), 0).unwrap();
    assert_eq!(net.params().learnable_count(), unet_param_count(8, 2, 15, 7));
}

#[test]
fn parameter_groups_partition_learnables() {
    for spec in [unet(8, 3), patch(8, 2)] {
        let net = Network::build(spec, 0).unwrap();
        let g = net.param_groups();
        let learnable: Vec<String> = net
            .params()
            .iter()
            .filter(|p| p.kind == Kind::Learnable)
            .map(|p| p.name.clone())
            .collect();
        let mut all: Vec<String> = g.backbone.iter().chain(&g.heads).cloned().collect();
        all.sort();
        let mut want = learnable.clone();
        want.sort();
        assert_eq!(all, want);
        assert!(!g.heads.is_empty() && !g.backbone.is_empty());
        assert!(g.heads.iter().all(|n| n.contains("head")), "{:?}", g.heads);
        assert!(g.backbone.iter().all(|n| !n.contains("head")));
    }
}

#[test]
fn default_backbones_differ() {
    let cfg = fmdacl::config::TrainConfig::default();
    assert_ne!(cfg.f1.kind, cfg.f2.kind);
    let a = Network::build(cfg.f1.clone(), 0).unwrap();
    let b = Network::build(cfg.f2.clone(), 0).unwrap();
    assert_ne!(a.params().learnable_count(), b.params().learnable_count());
}

/// Loss `sum(R_seg * seg) + sum(R_cls * cls)` for fixed random projections.
fn projected(net: &Network, store: &fmdacl::nn::ParamStore, x: &ImageBatch, mode: Mode, r: &(Tensor, Tensor)) -> f64 {
    let out = net.forward_with(store, x, mode).unwrap().output;
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
    dot(out.seg.tensor(), &r.0) + dot(out.cls.tensor(), &r.1)
}

fn grad_check(spec: BackboneSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Network::build(spec, 3).unwrap();
    let x = image(&mut rng, 2, 16, 16);
    let mode = Mode::Train { seed: 17 };
    let pass = net.forward_pass(&x, mode).unwrap();
    let rand_like = |rng: &mut ChaCha8Rng, t: &Tensor| {
        Tensor::from_vec(t.shape(), (0..t.len()).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    };
    let r = (rand_like(&mut rng, pass.output.seg.tensor()), rand_like(&mut rng, pass.output.cls.tensor()));
    let d = OutputGrad {
        seg: r.0.clone(),
        cls: r.1.clone(),
    };
    let mut g = Grads::zeros_like(net.params());
    net.backward(&pass, &d, &mut g);

    let h = 1e-5;
    let mut checked = 0;
    for (id, p) in net.params().iter().enumerate() {
        if p.kind != Kind::Learnable {
            continue;
        }
        for _ in 0..3 {
            let i = rng.random_range(0..p.value.len());
            let mut plus = net.params().clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = net.params().clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let num = (projected(&net, &plus, &x, mode, &r) - projected(&net, &minus, &x, mode, &r)) / (2.0 * h);
            let a = g.get(id).data()[i];
            let tol = 1e-3 * a.abs().max(num.abs()) + 1e-6;
            assert!((a - num).abs() <= tol, "{}[{i}]: analytic {a} vs numeric {num}", p.name);
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn unet_gradients_match_finite_differences() {
    grad_check(unet(8, 3));
}

#[test]
fn patch_attention_gradients_match_finite_differences() {
    grad_check(patch(8, 2));
    grad_check(patch(8, 3));
}

#[test]
fn eval_forward_leaves_parameters_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::build(unet(8, 2), 0).unwrap();
    let before = net.params().clone();
    let pass = net.forward_pass(&image(&mut rng, 2, 16, 16), Mode::Eval).unwrap();
    assert!(pass.stat_updates().is_empty());
    assert_eq!(net.params(), &before);
}

#[test]
fn patch_decoder_trains_at_head_rate() {
    let net = Network::build(patch(8, 2), 0).unwrap();
    let g = net.param_groups();
    assert!(g.heads.iter().any(|n| n.starts_with("seg_head.decoder.")));
    assert!(g.backbone.iter().any(|n| n.starts_with("blocks.")));
    assert!(g.backbone.iter().all(|n| !n.contains("decoder")));
}
