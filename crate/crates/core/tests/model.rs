mod common;

use common::*;
use ecenet::data::{LabelMap, IGNORE_LABEL};
use ecenet::model::{
    cross_entropy_loss, dice_loss, focal_loss, overall_loss, Checkpoint, EceNet, Encoder, EncoderConfig, LossWeights,
    ModelConfig, ModelOutput,
};
use ecenet::params::{ParamBuilder, ParamStore};
use ecenet::semantics_attention::UpdaterKind;
use ecenet::{Error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        n_classes: 4,
        alpha: 1.0,
        width: 8,
        heads: 2,
        encoder: EncoderConfig {
            patch: 4,
            widths: [8, 8, 16, 16],
            blocks: 1,
        },
        use_fr: true,
        updater: UpdaterKind::Gated,
    }
}

fn image(size: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..3 * size * size).map(|_| r.gen::<f64>()).collect();
    Tensor::new(&[3, size, size], data).unwrap()
}

fn forward(net: &EceNet, store: &ParamStore, img: &Tensor) -> (Tape, ModelOutput) {
    let tape = Tape::new();
    let out = {
        let p = store.bind(&tape);
        net.forward(&p, &tape.constant(img.clone())).unwrap()
    };
    (tape, out)
}

#[test]
fn encoder_stage_shapes() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut ParamBuilder::new(&mut store, 0), "enc", cfg.clone()).unwrap();
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    for size in [64usize, 96, 128] {
        let f = enc.forward(&p, &tape.constant(image(size, size as u64))).unwrap();
        for i in 0..4 {
            let side = size >> (i + 2);
            assert_eq!(f.stages[i].shape(), &[cfg.widths[i], side, side]);
            assert_eq!(f.extent(i), (side, side));
        }
    }
    let zero = enc.forward(&p, &tape.constant(Tensor::zeros(&[3, 64, 64]))).unwrap();
    for s in &zero.stages {
        assert!(s.value().data().iter().all(|&v| v == 0.0));
    }
    assert!(matches!(enc.forward(&p, &tape.constant(Tensor::zeros(&[3, 48, 64]))), Err(Error::Dimension { .. })));
}

#[test]
fn encoder_config_is_validated() {
    let mut cfg = micro_config();
    cfg.encoder.widths[2] = 7;
    assert!(matches!(EceNet::init(cfg, 0), Err(Error::Config(_))));
    let mut cfg = micro_config();
    cfg.heads = 3;
    assert!(matches!(EceNet::init(cfg, 0), Err(Error::Config(_))));
    let mut cfg = micro_config();
    cfg.n_classes = 1;
    assert!(matches!(EceNet::init(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn unify_matches_pointwise_oracle() {
    let (net, store) = EceNet::init(micro_config(), 1).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let mut r = rng(1);
    let widths = net.config.encoder.widths;
    let stages: [Var; 4] = std::array::from_fn(|i| tape.constant(Tensor::randn(&[widths[i], 2, 2], &mut r)));
    let x = net.unify_channels(&p, &stages).unwrap();
    for i in 0..4 {
        let w = param(&store, &format!("unify{}.weight", i + 1));
        let b = param(&store, &format!("unify{}.bias", i + 1));
        let s = stages[i].value();
        for k in 0..4 {
            let px: Vec<f64> = (0..widths[i]).map(|c| s.data()[c * 4 + k]).collect();
            let o = affine(&px, w.data(), b.data());
            for c in 0..8 {
                assert!((x[i].value().data()[c * 4 + k] - o[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_shapes() {
    for use_fr in [true, false] {
        let cfg = ModelConfig { use_fr, ..micro_config() };
        let (net, store) = EceNet::init(cfg, 2).unwrap();
        let (_, out) = forward(&net, &store, &image(64, 2));
        assert_eq!(out.seg_logits.shape(), &[4, 64, 64]);
        assert_eq!(out.summed_mask.shape(), &[4, 16, 16]);
        assert_eq!(out.class_probs.shape(), &[4, 4]);
        assert_eq!(out.g.shape(), &[4, 8]);
        assert_eq!(out.div_losses.len(), if use_fr { 4 } else { 0 });
        let stages: Vec<usize> = out.masks.iter().map(|m| m.stage).collect();
        assert_eq!(stages, vec![4, 3, 2, 1]);
        for (m, side) in out.masks.iter().zip([2, 4, 8, 16]) {
            assert_eq!(m.logits.shape(), &[4, side, side]);
        }
        for row in out.class_probs.value().data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(out.seg_logits.value().is_finite());
    }
}

/// `C·r²×h×w → C×rh×rw` after regrouping the ghost copies of each channel.
fn regroup_shuffle(g: &Tensor, c: usize, r: usize) -> Vec<f64> {
    let (h, w) = (g.shape()[1], g.shape()[2]);
    let mut out = vec![0.0; c * h * r * w * r];
    for ch in 0..c {
        for i in 0..h * r {
            for j in 0..w * r {
                let copy = (i % r) * r + j % r;
                out[(ch * h * r + i) * w * r + j] = g.at(&[copy * c + ch, i / r, j / r]);
            }
        }
    }
    out
}

/// Half-pixel-centred bilinear resampling of one plane.
fn bilinear_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let tap = |o: usize, s: usize, d: usize| {
        let pos = ((o as f64 + 0.5) * s as f64 / d as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(s - 1);
        (i0, (i0 + 1).min(s - 1), pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, ly) = tap(y, h, oh);
        for x in 0..ow {
            let (x0, x1, lx) = tap(x, w, ow);
            let v = src[y0 * w + x0] * (1.0 - ly) * (1.0 - lx)
                + src[y0 * w + x1] * (1.0 - ly) * lx
                + src[y1 * w + x0] * ly * (1.0 - lx)
                + src[y1 * w + x1] * ly * lx;
            out.push(v);
        }
    }
    out
}

#[test]
fn forward_matches_composed_oracle() {
    let (net, mut store) = EceNet::init(micro_config(), 3).unwrap();
    randomize_params(&mut store, "sau", 0.3, 3);
    randomize_params(&mut store, "classifier", 0.5, 4);
    let img = image(64, 3);
    let (_, out) = forward(&net, &store, &img);

    let tape = Tape::new();
    let p = store.bind(&tape);
    let feats = net.encoder.forward(&p, &tape.constant(img)).unwrap();
    let frs = net.fr.as_ref().unwrap();
    let rebuilt: [Var; 4] = std::array::from_fn(|i| frs[i].forward(&p, &feats.stages[i]).unwrap().y);
    let x = net.unify_channels(&p, &rebuilt).unwrap();
    let mask4 = net.mask_head.forward(&p, &x[3], 4).unwrap();
    let mut g = net.ece.extract(&p, &mask4).unwrap();
    let mut masks = vec![mask4.logits.value().clone()];
    let mut enhanced = vec![None; 3];
    for (k, stage) in [3usize, 2, 1].into_iter().enumerate() {
        let side = 16 >> (stage - 1);
        let tokens = x[stage - 1].reshape(&[8, side * side]).unwrap().t().unwrap();
        let s = net.sau[k].step(&p, &net.ece, &tokens, &g, side, side, stage).unwrap();
        enhanced[stage - 1] = Some(s.enhanced.t().unwrap().reshape(&[8, side, side]).unwrap());
        masks.push(s.new_mask.logits.value().clone());
        g = s.updated_g;
    }
    assert!(g.value().max_abs_diff(out.g.value()) < 1e-12);

    // 1/4-resolution base logits: ghost copies regrouped and shuffled, then
    // the 4C→N fuse.
    let mut lifted: Vec<Vec<f64>> = Vec::new();
    for (i, r) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let src = if i < 3 { enhanced[i].clone().unwrap() } else { x[3].clone() };
        let gh = net.ghosts[i].forward(&p, &src).unwrap();
        lifted.push(regroup_shuffle(gh.value(), 8, r));
    }
    let cat: Vec<f64> = lifted.concat();
    let (fw, fb) = (param(&store, "fuse.weight"), param(&store, "fuse.bias"));
    let mut base = vec![0.0; 4 * 256];
    for k in 0..256 {
        let px: Vec<f64> = (0..32).map(|c| cat[c * 256 + k]).collect();
        for (n, v) in affine(&px, fw.data(), fb.data()).into_iter().enumerate() {
            base[n * 256 + k] = v;
        }
    }

    let mut summed = vec![0.0; 4 * 256];
    for m in &masks {
        let side = m.shape()[1];
        for n in 0..4 {
            let up = bilinear_plane(&m.data()[n * side * side..(n + 1) * side * side], side, side, 16, 16);
            for k in 0..256 {
                summed[n * 256 + k] += up[k];
            }
        }
    }
    for (a, b) in out.summed_mask.value().data().iter().zip(&summed) {
        assert!((a - b).abs() < 1e-10);
    }

    let (cw, cb) = (param(&store, "classifier.weight"), param(&store, "classifier.bias"));
    let probs: Vec<Vec<f64>> = g
        .value()
        .data()
        .chunks(8)
        .map(|row| {
            let z = affine(row, cw.data(), cb.data());
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            z.iter().map(|v| (v - m).exp() / s).collect()
        })
        .collect();
    for n in 0..4 {
        let mut plane: Vec<f64> = (0..256)
            .map(|k| base[n * 256 + k] + (0..4).map(|q| probs[q][n] * summed[q * 256 + k]).sum::<f64>())
            .collect();
        plane = bilinear_plane(&plane, 16, 16, 64, 64);
        for (k, v) in plane.iter().enumerate() {
            assert!((out.seg_logits.value().data()[n * 4096 + k] - v).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_classifier_gives_uniform_class_probs() {
    let (net, mut store) = EceNet::init(micro_config(), 4).unwrap();
    zero_params(&mut store, "classifier");
    let (_, out) = forward(&net, &store, &image(64, 4));
    assert!(out.class_probs.value().data().iter().all(|&v| v == 0.25));
}

#[test]
fn zero_decoder_weights_give_constant_logits() {
    let (net, mut store) = EceNet::init(micro_config(), 5).unwrap();
    let bias = Tensor::new(&[4], vec![0.3, -0.2, 1.0, 0.0]).unwrap();
    let decoder: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("encoder") && !p.name.starts_with("fr"))
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in &decoder {
        zero_params(&mut store, name);
    }
    set_param(&mut store, "fuse.bias", bias.clone());
    let (_, out) = forward(&net, &store, &image(64, 5));
    for n in 0..4 {
        let plane = &out.seg_logits.value().data()[n * 4096..(n + 1) * 4096];
        assert!(plane.iter().all(|&v| v == bias.data()[n]), "class {n}");
    }
}

/// Joint class permutation of the mask head's output rows, the classifier
/// rows and the base fuse rows.
fn permute_classes(store: &mut ParamStore, perm: &[usize]) {
    for name in ["mask_head.phi2.weight", "mask_head.phi2.bias", "classifier.weight", "classifier.bias", "fuse.weight", "fuse.bias"] {
        let v = param(store, name);
        set_param(store, name, permute_leading(&v, perm));
    }
}

#[test]
fn joint_class_permutation_permutes_logits() {
    let (net, mut store) = EceNet::init(micro_config(), 6).unwrap();
    randomize_params(&mut store, "sau", 0.3, 6);
    let img = image(64, 6);
    let (_, a) = forward(&net, &store, &img);
    let perm = [2usize, 0, 3, 1];
    permute_classes(&mut store, &perm);
    let (_, b) = forward(&net, &store, &img);
    assert!(permute_leading(a.seg_logits.value(), &perm).max_abs_diff(b.seg_logits.value()) < 1e-9);
    assert!(permute_leading(a.summed_mask.value(), &perm).max_abs_diff(b.summed_mask.value()) < 1e-9);

    let labels: Vec<u8> = (0..64 * 64).map(|k| ((k / 64 + k % 64) / 16 % 4) as u8).collect();
    let inv: Vec<u8> = (0..4).map(|c| perm.iter().position(|&p| p == c).unwrap() as u8).collect();
    let gt = LabelMap::new(64, 64, labels.clone()).unwrap();
    let gt_perm = LabelMap::new(64, 64, labels.iter().map(|&l| inv[l as usize]).collect()).unwrap();
    let w = LossWeights::default();
    let la = overall_loss(&a, &gt, &w).unwrap().total.item();
    let lb = overall_loss(&b, &gt_perm, &w).unwrap().total.item();
    assert!((la - lb).abs() < 1e-9);
}

#[test]
fn forward_is_deterministic() {
    let (net, store) = EceNet::init(micro_config(), 7).unwrap();
    let img = image(64, 7);
    assert_eq!(net.predict(&store, &img).unwrap(), net.predict(&store, &img).unwrap());
    let (net2, store2) = EceNet::init(micro_config(), 7).unwrap();
    assert_eq!(net.predict(&store, &img).unwrap(), net2.predict(&store2, &img).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = micro_config();
    let (net, mut store) = EceNet::init(cfg.clone(), 8).unwrap();
    randomize_params(&mut store, "sau", 0.3, 8);
    let snapped: Vec<_> = store.iter().map(|(id, p)| (id, p.value.to_f32_grid())).collect();
    for (id, v) in snapped {
        store.set(id, v).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ecen");
    Checkpoint::from_store(&store, 17, vec![], cfg.hash()).save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.step, 17);
    assert_eq!(loaded.config_hash, cfg.hash());
    let (_, mut fresh) = EceNet::init(cfg.clone(), 99).unwrap();
    loaded.apply_to(&mut fresh).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let img = image(64, 8);
    let before = net.predict(&store, &img).unwrap();
    let after = net.predict(&fresh, &img).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let other = ModelConfig { updater: UpdaterKind::Plus, ..cfg.clone() };
    assert_ne!(other.hash(), cfg.hash());
    let (_, mut wrong) = EceNet::init(other, 0).unwrap();
    assert!(matches!(loaded.apply_to(&mut wrong), Err(Error::Data(_))));
}

fn labels(h: usize, w: usize, data: &[u8]) -> LabelMap {
    LabelMap::new(h, w, data.to_vec()).unwrap()
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let gt = labels(2, 2, &[0, 1, 2, 1]);
    let mut margin = Tensor::zeros(&[3, 2, 2]);
    for (k, &l) in gt.data.iter().enumerate() {
        margin.data_mut()[l as usize * 4 + k] = 30.0;
    }
    assert!(cross_entropy_loss(&tape.constant(margin), &gt).unwrap().item() < 1e-9);
    let uniform = cross_entropy_loss(&tape.constant(Tensor::full(&[3, 2, 2], 0.7)), &gt).unwrap().item();
    assert!((uniform - 3f64.ln()).abs() < 1e-12);

    let x = Tensor::randn(&[3, 2, 2], &mut rng(9));
    let gt = labels(2, 2, &[2, IGNORE_LABEL, 0, 1]);
    let mut total = 0.0;
    for k in [0usize, 2, 3] {
        let z: f64 = (0..3).map(|n| x.data()[n * 4 + k].exp()).sum();
        total -= (x.data()[gt.data[k] as usize * 4 + k].exp() / z).ln();
    }
    let ce = cross_entropy_loss(&tape.constant(x.clone()), &gt).unwrap().item();
    assert!((ce - total / 3.0).abs() < 1e-12);

    let ignored = LabelMap::filled(2, 2, IGNORE_LABEL);
    assert!(matches!(cross_entropy_loss(&tape.constant(x.clone()), &ignored), Err(Error::Data(_))));
    assert!(matches!(cross_entropy_loss(&tape.constant(x), &labels(2, 2, &[0, 1, 3, 0])), Err(Error::Data(_))));
}

fn focal_oracle(x: &Tensor, y: &Tensor, valid: &[f64], gamma: f64, alpha: f64) -> f64 {
    let plane = valid.len();
    let mut s = 0.0;
    for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
        let p = sigmoid(xi);
        let (pt, at) = if yi > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        s += valid[i % plane] * -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    s / (valid.iter().sum::<f64>() * (x.numel() / plane) as f64)
}

fn dice_oracle(x: &Tensor, y: &Tensor, valid: &[f64]) -> f64 {
    let plane = valid.len();
    let n = x.numel() / plane;
    let mut acc = 0.0;
    for c in 0..n {
        let (mut py, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for k in 0..plane {
            let p = sigmoid(x.data()[c * plane + k]) * valid[k];
            let t = y.data()[c * plane + k];
            py += p * t;
            ps += p;
            ys += t;
        }
        acc += (2.0 * py + 1.0) / (ps + ys + 1.0);
    }
    1.0 - acc / n as f64
}

#[test]
fn focal_and_dice_examples() {
    let tape = Tape::new();
    let gt = labels(4, 4, &[0, 0, 1, 1, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0]);
    let y = gt.one_hot(2).unwrap();
    let valid = gt.valid_mask();
    let sat = tape.constant(y.map(|v| if v > 0.5 { 30.0 } else { -30.0 }));
    assert!(focal_loss(&sat, &y, &valid, 2.0, 0.25).unwrap().item() < 1e-9);
    assert!(dice_loss(&sat, &y, &valid).unwrap().item() < 1e-3);

    let zero_class = dice_loss(&tape.constant(Tensor::zeros(&[1, 2, 2])), &Tensor::zeros(&[1, 2, 2]), &Tensor::ones(&[1, 2, 2]))
        .unwrap()
        .item();
    assert!((zero_class - (1.0 - 1.0 / 3.0)).abs() < 1e-15);

    let mut with_ignore = gt.data.clone();
    with_ignore[5] = IGNORE_LABEL;
    let gt = labels(4, 4, &with_ignore);
    let (y, valid) = (gt.one_hot(2).unwrap(), gt.valid_mask());
    let x = Tensor::randn(&[2, 4, 4], &mut rng(10)).map(|v| 2.0 * v);
    let f = focal_loss(&tape.constant(x.clone()), &y, &valid, 2.0, 0.25).unwrap().item();
    let d = dice_loss(&tape.constant(x.clone()), &y, &valid).unwrap().item();
    assert!((f - focal_oracle(&x, &y, valid.data(), 2.0, 0.25)).abs() < 1e-12);
    assert!((d - dice_oracle(&x, &y, valid.data())).abs() < 1e-12);

    let bad = Tensor::zeros(&[3, 4, 4]);
    assert!(matches!(focal_loss(&tape.constant(x.clone()), &bad, &valid, 2.0, 0.25), Err(Error::Dimension { .. })));
    assert!(matches!(dice_loss(&tape.constant(x), &bad, &valid), Err(Error::Dimension { .. })));
}

/// Hand-built model output at 8×8 with masks at 2×2.
fn synthetic_output(tape: &Tape, seg: Tensor, mask: Tensor, divs: &[f64]) -> ModelOutput {
    ModelOutput {
        seg_logits: tape.constant(seg),
        summed_mask: tape.constant(mask),
        class_probs: tape.constant(Tensor::full(&[2, 2], 0.5)),
        div_losses: divs.iter().map(|&d| tape.constant(Tensor::scalar(d))).collect(),
        g: tape.constant(Tensor::zeros(&[2, 4])),
        masks: vec![],
    }
}

#[test]
fn overall_loss_combines_components() {
    let tape = Tape::new();
    let mut r = rng(11);
    let gt_data: Vec<u8> = (0..64).map(|_| r.gen_range(0..2u8)).collect();
    let gt = labels(8, 8, &gt_data);
    let seg = Tensor::randn(&[2, 8, 8], &mut r);
    let mask = Tensor::randn(&[2, 2, 2], &mut r);
    let divs = [0.9, 0.8, 0.7, 0.6];
    let out = synthetic_output(&tape, seg.clone(), mask.clone(), &divs);

    let zero = LossWeights {
        lambda_div: 0.0,
        lambda_focal: 0.0,
        lambda_dice: 0.0,
        ..LossWeights::default()
    };
    let ce = cross_entropy_loss(&tape.constant(seg.clone()), &gt).unwrap().item();
    assert_eq!(overall_loss(&out, &gt, &zero).unwrap().total.item(), ce);

    let w = LossWeights::default();
    let small = gt.downsample(4).unwrap();
    let (y, valid) = (small.one_hot(2).unwrap(), small.valid_mask());
    let expect = ce
        + focal_oracle(&mask, &y, valid.data(), 2.0, 0.25)
        + dice_oracle(&mask, &y, valid.data())
        + 0.2 * divs.iter().sum::<f64>() / 4.0;
    let parts = overall_loss(&out, &gt, &w).unwrap();
    assert!((parts.total.item() - expect).abs() < 1e-12);
    assert!((parts.div - 0.75).abs() < 1e-15);

    let seg_fit = gt.one_hot(2).unwrap().map(|v| if v > 0.5 { 30.0 } else { -30.0 });
    let mask_fit = y.map(|v| if v > 0.5 { 30.0 } else { -30.0 });
    let fit = synthetic_output(&tape, seg_fit, mask_fit, &divs);
    assert!(overall_loss(&fit, &gt, &w).unwrap().total.item() < 0.2 * 0.75 + 1e-3);

    let bad = LossWeights { lambda_dice: -1.0, ..w };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
