use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{cosine_lr, parse_kv, parse_value};
use super::data::Dataset;
use super::metrics::ConfusionMatrix;
use super::search::{batch_loss, crop_offsets, divergence, evaluate};
use crate::error::{Error, Result};
use crate::microtensor::{clip_grad_norm, ParamGroup, ParamStore, SgdMomentum};
use crate::relaxation::{DiscreteNet, NetConfig};
use crate::search_space::{CellGenotype, NetworkPath};

/// Training settings for a decoded architecture trained from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub filter_multiplier: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub crop_size: usize,
    pub grad_clip: Option<f64>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            filter_multiplier: 4,
            epochs: 20,
            batch_size: 2,
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            seed: 0,
            crop_size: 64,
            grad_clip: Some(5.0),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_multiplier == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "filter_multiplier, batch_size and epochs must be positive",
            ));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(32) {
            return Err(Error::invalid(format!(
                "crop_size {} is not a positive multiple of 32",
                self.crop_size
            )));
        }
        for (name, v) in [
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
            ("grad_clip", self.grad_clip.unwrap_or(1.0)),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "momentum and weight_decay must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in parse_kv(text)? {
            let v = value.as_str();
            match key.as_str() {
                "filter_multiplier" | "F" => c.filter_multiplier = parse_value(&key, v)?,
                "epochs" => c.epochs = parse_value(&key, v)?,
                "batch_size" => c.batch_size = parse_value(&key, v)?,
                "lr_max" => c.lr_max = parse_value(&key, v)?,
                "lr_min" => c.lr_min = parse_value(&key, v)?,
                "momentum" => c.momentum = parse_value(&key, v)?,
                "weight_decay" => c.weight_decay = parse_value(&key, v)?,
                "seed" => c.seed = parse_value(&key, v)?,
                "crop_size" => c.crop_size = parse_value(&key, v)?,
                "grad_clip" => {
                    c.grad_clip = if v == "none" {
                        None
                    } else {
                        Some(parse_value(&key, v)?)
                    }
                }
                other => return Err(Error::invalid(format!("unknown retrain key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Mean training-minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss over the training set after the last update.
    pub final_train_loss: f64,
}

/// Trains the discrete network for `cell` and `path` from a fresh
/// initialisation on `train` and scores it on `val`.
pub fn retrain_decoded(
    cell: &CellGenotype,
    path: &NetworkPath,
    train: &Dataset,
    val: &Dataset,
    config: &RetrainConfig,
) -> Result<(ParamStore, RetrainReport)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "retraining needs non-empty train and validation sets",
        ));
    }
    if train.num_classes != val.num_classes || config.crop_size > train.size {
        return Err(Error::invalid(
            "train and validation sets disagree or the crop exceeds the images",
        ));
    }
    let net_config = NetConfig::new(
        path.len(),
        cell.blocks.len(),
        config.filter_multiplier,
        train.num_classes,
    );
    let mut store = ParamStore::new();
    let net = DiscreteNet::new(net_config, cell, path, &mut store, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e7a_17e7_a17e_7a17);
    let sgd = SgdMomentum {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let last_step = config.epochs * steps_per_epoch - 1;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (mb, chunk) in order.chunks(config.batch_size).enumerate() {
            let offsets = crop_offsets(&mut rng, chunk.len(), train.size, config.crop_size);
            let (x, labels) = train.batch(chunk, config.crop_size, &offsets)?;
            let (mut g, loss, _) = batch_loss(&store, x, &labels, |fx, xi| net.forward(fx, xi))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(divergence(epoch, mb, format!("loss is {value}")));
            }
            g.backward(loss)?;
            store.zero_grads();
            g.accumulate_param_grads(&mut store);
            let norm = store.grad_norm(ParamGroup::Weights);
            if !norm.is_finite() {
                return Err(divergence(epoch, mb, format!("gradient norm is {norm}")));
            }
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut store, ParamGroup::Weights, c);
            }
            sgd.step(
                &mut store,
                ParamGroup::Weights,
                cosine_lr(step, last_step, config.lr_max, config.lr_min)?,
            );
            step += 1;
            sum += value;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
    }
    store.zero_grads();
    let all: Vec<usize> = (0..train.len()).collect();
    let (final_train_loss, _) = evaluate(&store, train, &all, config.batch_size, |fx, xi| {
        net.forward(fx, xi)
    })?;
    let all: Vec<usize> = (0..val.len()).collect();
    let (_, cm) = evaluate(&store, val, &all, config.batch_size, |fx, xi| {
        net.forward(fx, xi)
    })?;
    let report = RetrainReport {
        miou: cm.miou()?,
        pixel_accuracy: cm.pixel_accuracy()?,
        epoch_losses,
        final_train_loss,
    };
    Ok((store, report))
}

/// mIoU on `val` of predicting `train`'s most frequent class everywhere.
pub fn majority_baseline_miou(train: &Dataset, val: &Dataset) -> Result<f64> {
    let counts = train.class_counts();
    let majority = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(c, _)| c) as u8;
    let mut cm = ConfusionMatrix::new(val.num_classes, None);
    for labels in &val.labels {
        cm.add(&vec![majority; labels.len()], labels)?;
    }
    cm.miou()
}
