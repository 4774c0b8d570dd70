mod common;

use common::brute_force_miou;
use ecenet::data::{gen_sample, gen_shapes, load_dataset, save_dataset, LabelMap, SegSample, IGNORE_LABEL};
use ecenet::metrics::ConfusionMatrix;
use ecenet::model::EceNet;
use ecenet::train::{evaluate, train, LogLine, TrainConfig};
use ecenet::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model and images so a handful of steps run in well under a second.
fn micro_train_config() -> TrainConfig {
    TrainConfig {
        seed: 3,
        image_size: 64,
        width: 8,
        heads: 2,
        encoder_widths: [8, 8, 16, 16],
        steps: 3,
        batch_size: 2,
        warmup_steps: 2,
        eval_interval: 2,
        eval_samples: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn generator_is_deterministic_and_well_formed() {
    let a = gen_shapes(5, 6, 64, 4).unwrap();
    let b = gen_shapes(5, 6, 64, 4).unwrap();
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.labels, y.labels);
    }
    assert!(gen_shapes(5, 0, 64, 4).unwrap().is_empty());
    assert_ne!(gen_shapes(6, 1, 64, 4).unwrap()[0].labels, a[0].labels);
    for s in &a {
        assert_eq!(s.image.shape(), &[3, 64, 64]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.labels.data.iter().any(|&l| l != 0));
        s.labels.validate(4).unwrap();
    }
    assert_eq!(gen_sample(5, 2, 64, 4).labels, a[2].labels);
    assert!(matches!(gen_shapes(0, 1, 64, 1), Err(Error::Config(_))));
}

#[test]
fn every_class_is_common_enough() {
    let samples = gen_shapes(0, 1000, 64, 4).unwrap();
    for c in 0..4u8 {
        let with = samples.iter().filter(|s| s.labels.data.contains(&c)).count();
        assert!(with >= 50, "class {c} in only {with} of 1000 samples");
    }
}

#[test]
fn miou_hand_case() {
    let mut cm = ConfusionMatrix::new(2);
    cm.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    assert_eq!(cm.iou(0), Some(0.5));
    assert_eq!(cm.iou(1), Some(2.0 / 3.0));
    assert_eq!(cm.miou().unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
    assert_eq!(cm.miou().unwrap(), brute_force_miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2));
}

#[test]
fn miou_matches_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let n = r.gen_range(2..6usize);
        let len = r.gen_range(4..40usize);
        let gt: Vec<u8> = (0..len).map(|_| r.gen_range(0..n as u8)).collect();
        let pred: Vec<u8> = (0..len).map(|_| r.gen_range(0..n as u8)).collect();
        let mut cm = ConfusionMatrix::new(n);
        cm.add(&gt, &pred).unwrap();
        assert_eq!(cm.miou().unwrap(), brute_force_miou(&gt, &pred, n));
    }
}

#[test]
fn miou_extremes_and_ignored_pixels() {
    let gt = [0u8, 1, 2, 2, IGNORE_LABEL];
    let mut cm = ConfusionMatrix::new(3);
    cm.add(&gt, &[0, 1, 2, 2, 0]).unwrap();
    assert_eq!(cm.miou().unwrap(), 1.0);
    assert_eq!(cm.total(), 4);

    let mut cm = ConfusionMatrix::new(3);
    cm.add(&gt, &[1, 2, 0, 0, 0]).unwrap();
    assert_eq!(cm.miou().unwrap(), 0.0);

    let mut cm = ConfusionMatrix::new(3);
    cm.add(&[0, 0], &[0, 2]).unwrap();
    assert_eq!(cm.per_class_iou(), vec![Some(0.5), None, None]);
    assert!(matches!(ConfusionMatrix::new(3).miou(), Err(Error::Contract(_))));
    assert!(matches!(cm.add(&[3], &[0]), Err(Error::Data(_))));
}

#[test]
fn evaluation_ignores_sample_order() {
    let cfg = micro_train_config();
    let (net, store) = EceNet::init(cfg.model_config(), 1).unwrap();
    let mut samples = gen_shapes(7, 5, 64, 4).unwrap();
    let a = evaluate(&net, &store, &samples).unwrap();
    samples.reverse();
    let b = evaluate(&net, &store, &samples).unwrap();
    assert_eq!(a.confusion, b.confusion);
    assert_eq!(a.miou, b.miou);
    assert_eq!(a.confusion.total(), 5 * 64 * 64);
    assert!(matches!(evaluate(&net, &store, &[]), Err(Error::Contract(_))));
}

#[test]
fn evaluating_own_predictions_is_perfect() {
    let cfg = micro_train_config();
    let (net, store) = EceNet::init(cfg.model_config(), 2).unwrap();
    let samples: Vec<SegSample> = gen_shapes(8, 3, 64, 4)
        .unwrap()
        .into_iter()
        .map(|s| {
            let logits = net.predict(&store, &s.image).unwrap();
            let labels = LabelMap::new(64, 64, ecenet::class_extraction::argmax_classes(&logits)).unwrap();
            SegSample { image: s.image, labels }
        })
        .collect();
    assert_eq!(evaluate(&net, &store, &samples).unwrap().miou, 1.0);
}

#[test]
fn zero_steps_keep_the_initialization() {
    let cfg = TrainConfig { steps: 0, ..micro_train_config() };
    let out = train(&cfg, |_| {}).unwrap();
    let (_, init) = EceNet::init(cfg.model_config(), cfg.seed).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoint.step, 0);
    for (p, (_, q)) in out.checkpoint.params.iter().zip(init.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = TrainConfig { lr: 0.0, ..micro_train_config() };
    let out = train(&cfg, |_| {}).unwrap();
    let (_, init) = EceNet::init(cfg.model_config(), cfg.seed).unwrap();
    for ((_, p), (_, q)) in out.store.iter().zip(init.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert_eq!(out.checkpoint.moments.len(), 2 * init.len());
}

#[test]
fn training_logs_and_moves_parameters() {
    let cfg = micro_train_config();
    let mut seen: Vec<LogLine> = Vec::new();
    let out = train(&cfg, |l| seen.push(l.clone())).unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen.iter().map(|l| l.miou.is_some()).collect::<Vec<_>>(), vec![false, true, true]);
    assert!(seen.iter().all(|l| l.loss.is_finite() && l.loss > 0.0));
    assert_eq!(out.final_miou, seen[2].miou);
    let (_, init) = EceNet::init(cfg.model_config(), cfg.seed).unwrap();
    let moved = out.store.iter().zip(init.iter()).filter(|((_, p), (_, q))| p.value != q.value).count();
    assert!(moved > out.store.len() / 2);
    assert!(out.store.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == v as f32 as f64)));
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = micro_train_config();
    let a = train(&cfg, |_| {}).unwrap();
    let b = train(&cfg, |_| {}).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.checkpoint.write(&mut x).unwrap();
    b.checkpoint.write(&mut y).unwrap();
    assert_eq!(x, y);
    let lines = |o: &ecenet::train::TrainOutcome| o.log.iter().map(|l| l.to_string()).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
}

#[test]
fn config_text_round_trip_and_rejections() {
    let cfg = micro_train_config();
    let back = TrainConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.model_config().hash(), cfg.model_config().hash());

    let text = "# comment\nseed = 4\nsteps = 10 # trailing\n\nupdater = plus\nuse_fr = false\n";
    let parsed = TrainConfig::parse(text).unwrap();
    assert_eq!((parsed.seed, parsed.steps, parsed.use_fr), (4, 10, false));
    assert_eq!(parsed.updater.to_string(), "plus");

    assert!(matches!(TrainConfig::parse("seed = 1\nlearning_rate = 0.1\n"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("seed = 1\nsteps = many\n"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("seed = 1\nimage_size = 48\n").and_then(|c| c.validate()), Err(Error::Config(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let samples = gen_shapes(9, 3, 64, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.image.to_f32_grid(), b.image);
        assert_eq!(a.labels, b.labels);
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path()).unwrap().is_empty());
    assert!(load_dataset(&dir.path().join("missing")).is_err());

    let t = LabelMap::new(2, 2, vec![0, 1, IGNORE_LABEL, 3]).unwrap().to_tensor();
    assert_eq!(LabelMap::from_tensor(&t).unwrap().data, vec![0, 1, IGNORE_LABEL, 3]);
    assert!(LabelMap::from_tensor(&Tensor::full(&[2, 2], 0.5)).is_err());
}
