//! Training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tnnsim_core::data::{Dataset, ImageSet};
use tnnsim_core::rng::stream;
use tnnsim_core::tnn::{accuracy, CompiledModel, NetworkModel};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::net::{parse_arch, softmax_cross_entropy, Mode, NetSpec, Quantization, ShadowModel};
use crate::optim::{adamw_step, AdamState, AdamWConfig, LrSchedule};

const STREAM_INIT: u64 = 0x494e4954;
const STREAM_SHUFFLE: u64 = 0x5348;
const STREAM_AUGMENT: u64 = 0x4147;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Hidden blocks, e.g. `"d512,d512"` or `"c16,c16p,c32,c32p,d512"`.
    pub arch: String,
    /// Weight ternarization threshold.
    pub weight_delta: f64,
    /// Hidden activation threshold.
    pub activation_delta: f64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Length of the first cosine period, in epochs.
    pub restart_epochs: f64,
    pub restart_mult: u64,
    pub epochs: usize,
    /// Master seed for initialization, shuffling and augmentation; set by
    /// the caller rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub augment: AugmentConfig,
    /// Use only the first `n` training images.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test images.
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tnn,
            arch: "d512,d512".into(),
            weight_delta: 0.05,
            activation_delta: 0.05,
            batch_size: 128,
            lr_max: 5e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            restart_epochs: 50.0,
            restart_mult: 2,
            epochs: 30,
            seed: 0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            augment: AugmentConfig::default(),
            train_limit: None,
            test_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if !(self.weight_delta >= 0.0 && self.activation_delta >= 0.0) {
            return err("deltas must be >= 0".into());
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return err(format!("need 0 <= lr_min <= lr_max, lr_max > 0 (got {}, {})", self.lr_min, self.lr_max));
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay must be >= 0".into());
        }
        if !(self.restart_epochs > 0.0) || self.restart_mult == 0 {
            return err("restart_epochs must be > 0 and restart_mult >= 1".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return err("bn_momentum must lie in [0, 1) and bn_eps > 0".into());
        }
        if self.augment.max_rotation_deg < 0.0 {
            return err("max_rotation_deg must be >= 0".into());
        }
        parse_arch(&self.arch)?;
        Ok(())
    }

    pub fn net_spec(&self) -> NetSpec {
        NetSpec { mode: self.mode, weight_delta: self.weight_delta, activation_delta: self.activation_delta, bn_eps: self.bn_eps }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            first_period: ((self.restart_epochs * steps_per_epoch as f64).round() as u64).max(1),
            period_mult: self.restart_mult,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
}

pub fn write_metrics_csv<W: Write>(out: &mut W, metrics: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,test_accuracy,lr")?;
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.epoch, m.train_loss, m.test_accuracy, m.lr)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    /// Inference model from the epoch with the highest test accuracy.
    pub best_model: NetworkModel,
    pub best_epoch: usize,
    pub max_accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Final latent model and optimizer state.
    pub shadow: ShadowModel<f32>,
    pub optimizer: AdamState<f32>,
}

/// Test accuracy of the integer model exported from `shadow`.
pub fn evaluate(shadow: &ShadowModel<f32>, test: &ImageSet) -> Result<(NetworkModel, f64)> {
    let net = shadow.to_network()?;
    let acc = accuracy(&CompiledModel::new(&net)?, &test.images(), test.labels())?;
    Ok((net, acc))
}

pub fn init_model(cfg: &TrainConfig, data: &Dataset) -> Result<ShadowModel<f32>> {
    cfg.validate()?;
    let blocks = parse_arch(&cfg.arch)?;
    ShadowModel::new(data.train.shape(), data.classes, &blocks, cfg.net_spec(), &mut stream(cfg.seed, &[STREAM_INIT]))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut ShadowModel<f32>,
    opt: &mut AdamState<f32>,
    x: &[f32],
    labels: &[u8],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let fwd = model.forward(x, labels.len(), true, Quantization::Hard)?;
    let (loss, dlogits) = softmax_cross_entropy(&fwd.logits, labels, model.classes());
    if !loss.is_finite() {
        return Err(Error::NonFinite { what: "training loss".into(), step: opt.step });
    }
    let grads = model.backward(&fwd.cache, &dlogits);
    adamw_step(model, opt, &grads, lr, &cfg.adamw())?;
    model.update_running_stats(&fwd.cache, cfg.bn_momentum);
    Ok(loss as f64)
}

/// Trains from scratch, evaluating the exported integer model on the test
/// set after every epoch. `progress` sees each epoch's metrics.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut progress: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    let train_set = match cfg.train_limit {
        Some(n) => data.train.head(n),
        None => data.train.clone(),
    };
    let test_set = match cfg.test_limit {
        Some(n) => data.test.head(n),
        None => data.test.clone(),
    };
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::config("training and test sets must be nonempty"));
    }
    let mut model = init_model(cfg, data)?;
    let mut opt = AdamState::new(&model);
    let shape = train_set.shape();
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, NetworkModel)> = None;
    let mut x = Vec::with_capacity(cfg.batch_size * shape.len());
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr(opt.step);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = stream(cfg.seed, &[STREAM_AUGMENT, epoch as u64, bi as u64]);
            x.clear();
            labels.clear();
            for &i in chunk {
                let img = augment(train_set.image(i), shape, &mut rng, &cfg.augment);
                x.extend(img.iter().map(|&p| p as f32));
                labels.push(train_set.labels()[i]);
            }
            lr = schedule.lr(opt.step);
            loss_sum += train_step(&mut model, &mut opt, &x, &labels, lr, cfg)? * chunk.len() as f64;
        }
        let (net, acc) = evaluate(&model, &test_set)?;
        let m = EpochMetrics { epoch, train_loss: loss_sum / n as f64, test_accuracy: acc, lr };
        progress(&m);
        metrics.push(m);
        if best.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            best = Some((epoch, acc, net));
        }
    }
    let (best_epoch, max_accuracy, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { best_model, best_epoch, max_accuracy, metrics, shadow: model, optimizer: opt })
}
