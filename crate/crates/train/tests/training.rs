use rand::Rng;
use tnnsim_core::data::{Dataset, ImageSet};
use tnnsim_core::rng::seeded;
use tnnsim_core::tnn::{accuracy, decode_model, encode_model, CompiledModel, InputSpec};
use tnnsim_train::net::{parse_arch, softmax_cross_entropy, ParamKind, Quantization, ShadowModel};
use tnnsim_train::optim::AdamState;
use tnnsim_train::train::{init_model, train_step, write_metrics_csv};
use tnnsim_train::{train, Mode, TrainConfig};

const TOY: InputSpec = InputSpec { channels: 1, height: 4, width: 4 };

/// Three classes: bright left column, bright right column, bright top row.
fn toy_set(n: usize, seed: u64) -> ImageSet {
    let mut rng = seeded(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = (i % 3) as u8;
        for y in 0..4 {
            for x in 0..4 {
                let lit = match class {
                    0 => x == 0,
                    1 => x == 3,
                    _ => y == 0,
                };
                let base: u8 = if lit { 200 } else { 20 };
                pixels.push(base.saturating_add(rng.random_range(0..40)));
            }
        }
        labels.push(class);
    }
    ImageSet::new(TOY, pixels, labels).unwrap()
}

fn toy_data() -> Dataset {
    Dataset::new(toy_set(240, 1), toy_set(60, 2), 3).unwrap()
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig { arch: "d16".into(), batch_size: 16, epochs: 3, seed, ..Default::default() }
}

fn batch(set: &ImageSet, range: std::ops::Range<usize>) -> (Vec<f32>, Vec<u8>) {
    let x = range.clone().flat_map(|i| set.image(i).iter().map(|&p| p as f32)).collect();
    (x, set.labels()[range].to_vec())
}

/// Expected cross-entropy of `k` i.i.d. `N(0, sd^2)` logits, by Monte Carlo
/// with Box-Muller normals.
fn iid_logit_cross_entropy(k: usize, sd: f64, samples: usize) -> f64 {
    let mut rng = seeded(99);
    let mut total = 0.0;
    for _ in 0..samples {
        let z: Vec<f64> = (0..k)
            .map(|_| {
                let (u, v): (f64, f64) = (1.0 - rng.random::<f64>(), rng.random());
                sd * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
            })
            .collect();
        total += z.iter().map(|x| x.exp()).sum::<f64>().ln() - z[0];
    }
    total / samples as f64
}

#[test]
fn initial_logits_have_unit_scale() {
    let mut rng = seeded(5);
    let input = InputSpec { channels: 1, height: 28, width: 28 };
    let n = 256;
    let pixels: Vec<u8> = (0..n * 784).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let set = ImageSet::new(input, pixels, labels).unwrap();
    let data = Dataset::new(set.clone(), set.clone(), 10).unwrap();
    let mut sds = Vec::new();
    for mode in [Mode::Tnn, Mode::Bnn] {
        let cfg = TrainConfig { mode, ..Default::default() };
        let m = init_model(&cfg, &data).unwrap();
        let (x, y) = batch(&set, 0..n);
        let f = m.forward(&x, n, true, Quantization::Hard).unwrap();
        let (loss, _) = softmax_cross_entropy(&f.logits, &y, 10);
        let sd = (f.logits.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / f.logits.len() as f64).sqrt();
        // +-1 inputs against fan_in +-1 weights scaled by fan_in^-1/2
        assert!(sd > 0.3 && sd < 1.2, "{mode:?}: logit sd {sd}");
        let expected = iid_logit_cross_entropy(10, sd, 20_000);
        assert!((loss as f64 - expected).abs() < 0.2, "{mode:?}: loss {loss}, iid oracle {expected}");
        sds.push(sd);
    }
    // zeros in ternary weights and activations shrink the logits
    assert!(sds[0] < sds[1], "{sds:?}");
}

#[test]
fn single_sample_batch_is_finite() {
    let data = toy_data();
    let cfg = toy_config(0);
    let mut m = init_model(&cfg, &data).unwrap();
    let mut opt = AdamState::new(&m);
    let (x, y) = batch(&data.train, 0..1);
    let loss = train_step(&mut m, &mut opt, &x, &y, 1e-3, &cfg).unwrap();
    assert!(loss.is_finite());
}

#[test]
fn same_seed_same_loss_trajectory() {
    let data = toy_data();
    let run = |seed| {
        let cfg = toy_config(seed);
        let mut m = init_model(&cfg, &data).unwrap();
        let mut opt = AdamState::new(&m);
        (0..3)
            .map(|s| {
                let (x, y) = batch(&data.train, s * 16..(s + 1) * 16);
                train_step(&mut m, &mut opt, &x, &y, 1e-3, &cfg).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

fn latents_in_range(m: &ShadowModel<f32>) -> bool {
    m.params().iter().filter(|p| p.kind == ParamKind::Latent).flat_map(|p| &p.values).all(|w| w.abs() <= 1.0)
}

#[test]
fn loss_decreases_on_separable_data() {
    let data = toy_data();
    let mut improved = 0;
    for seed in 0..3 {
        let cfg = toy_config(seed);
        let mut m = init_model(&cfg, &data).unwrap();
        let mut opt = AdamState::new(&m);
        let mut losses = Vec::new();
        for step in 0..100 {
            let start = (step * 16) % 240;
            let (x, y) = batch(&data.train, start..start + 16);
            // large steps push latents into the clip
            losses.push(train_step(&mut m, &mut opt, &x, &y, 2e-2, &cfg).unwrap());
            assert!(latents_in_range(&m));
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
        improved += usize::from(tail < head);
    }
    assert!(improved >= 2, "{improved}/3 seeds improved");
}

#[test]
fn recorded_accuracy_matches_reloaded_model() {
    let data = toy_data();
    let cfg = toy_config(2);
    let out = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert_eq!(out.max_accuracy, out.metrics[out.best_epoch - 1].test_accuracy);
    assert!(out.max_accuracy > 0.9, "{}", out.max_accuracy);
    let bytes = encode_model(&out.best_model).unwrap();
    let reloaded = decode_model(&bytes).unwrap();
    let acc = accuracy(&CompiledModel::new(&reloaded).unwrap(), &data.test.images(), data.test.labels()).unwrap();
    assert_eq!(acc, out.max_accuracy);

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &out.metrics).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,train_loss,test_accuracy,lr\n1,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn full_runs_are_bit_reproducible() {
    let data = toy_data();
    let cfg = TrainConfig { arch: "c4p,d8".into(), augment: Default::default(), ..toy_config(9) };
    let a = train(&cfg, &data, |_| {}).unwrap();
    let b = train(&cfg, &data, |_| {}).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(encode_model(&a.best_model).unwrap(), encode_model(&b.best_model).unwrap());
    assert_eq!(a.shadow, b.shadow);
}

#[test]
fn shorter_run_is_a_prefix_of_longer_run() {
    let data = toy_data();
    let long = train(&TrainConfig { epochs: 5, ..toy_config(4) }, &data, |_| {}).unwrap();
    let short = train(&TrainConfig { epochs: 2, ..toy_config(4) }, &data, |_| {}).unwrap();
    assert_eq!(short.metrics[..], long.metrics[..2]);
}

#[test]
fn augmented_training_runs() {
    let data = toy_data();
    let mut cfg = toy_config(3);
    cfg.augment.enabled = true;
    let out = train(&cfg, &data, |_| {}).unwrap();
    assert!(out.metrics.iter().all(|m| m.train_loss.is_finite()));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = toy_data();
    for cfg in [
        TrainConfig { batch_size: 0, ..toy_config(0) },
        TrainConfig { epochs: 0, ..toy_config(0) },
        TrainConfig { weight_delta: -0.1, ..toy_config(0) },
        TrainConfig { arch: "q7".into(), ..toy_config(0) },
        TrainConfig { lr_min: 1.0, ..toy_config(0) },
    ] {
        assert!(train(&cfg, &data, |_| {}).is_err(), "{cfg:?}");
    }
    assert!(parse_arch("d4,c3").is_ok());
    let bad_arch = TrainConfig { arch: "d4,c3".into(), ..toy_config(0) };
    assert!(train(&bad_arch, &data, |_| {}).is_err());
}
