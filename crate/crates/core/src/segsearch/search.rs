use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{cosine_lr, SearchConfig};
use super::data::{split_indices, Dataset};
use super::metrics::{argmax_labels, ConfusionMatrix};
use crate::error::{Error, Result};
use crate::microtensor::{
    clip_grad_norm, Adam, Graph, NodeId, ParamGroup, ParamStore, SgdMomentum, Tensor4,
};
use crate::relaxation::{
    alpha_entropy, beta_entropy, normalize_alpha, normalize_beta, ArchSnapshot, Fwd, NormMode,
    SuperNet,
};

pub const TRACE_CSV_HEADER: &str = "epoch,lossA,lossB,miou,lr,alpha_entropy,beta_entropy";

/// Metrics after one completed epoch. `loss_a` averages the training
/// minibatches of the epoch; the other scores come from an evaluation pass
/// over trainB after the epoch's updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Learning rate of the epoch's last weight step.
    pub lr: f64,
    pub alpha_entropy: f64,
    pub beta_entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<EpochRecord>,
}

impl SearchTrace {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRACE_CSV_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss_a, r.loss_b, r.miou, r.lr, r.alpha_entropy, r.beta_entropy
            );
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.records.iter().all(|r| {
            [
                r.loss_a,
                r.loss_b,
                r.miou,
                r.pixel_accuracy,
                r.lr,
                r.alpha_entropy,
                r.beta_entropy,
            ]
            .iter()
            .all(|v| v.is_finite())
        })
    }
}

/// Which data split produced a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    A,
    B,
}

/// How many optimizer updates consumed gradients from each split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub weight_updates_from_train_a: u64,
    pub weight_updates_from_train_b: u64,
    pub arch_updates_from_train_a: u64,
    pub arch_updates_from_train_b: u64,
}

impl UpdateCounters {
    fn record(&mut self, group: ParamGroup, split: Split) {
        let c = match (group, split) {
            (ParamGroup::Weights, Split::A) => &mut self.weight_updates_from_train_a,
            (ParamGroup::Weights, Split::B) => &mut self.weight_updates_from_train_b,
            (ParamGroup::Architecture, Split::A) => &mut self.arch_updates_from_train_a,
            (ParamGroup::Architecture, Split::B) => &mut self.arch_updates_from_train_b,
        };
        *c += 1;
    }
}

/// Reported to the observer after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepEvent {
    /// 1-based.
    pub epoch: usize,
    /// 0-based index of the minibatch within the epoch.
    pub minibatch: usize,
    pub group: ParamGroup,
}

pub type StepObserver<'a> = dyn FnMut(&StepEvent, &SuperNet, &ParamStore) + 'a;

pub struct SearchOutcome {
    pub trace: SearchTrace,
    pub initial_snapshot: ArchSnapshot,
    pub snapshot: ArchSnapshot,
    pub store: ParamStore,
    pub counters: UpdateCounters,
    /// Learning rate of every weight step, in order.
    pub weight_lrs: Vec<f64>,
}

/// Loss of one minibatch with its gradients accumulated into the store,
/// tagged with the split it came from.
struct SplitGrads {
    split: Split,
    loss: f64,
}

pub(crate) fn batch_loss<F>(
    store: &ParamStore,
    x: Tensor4,
    labels: &[u8],
    forward: F,
) -> Result<(Graph, NodeId, NodeId)>
where
    F: FnOnce(&mut Fwd, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let (loss, logits) = {
        let mut fx = Fwd::new(&mut g, store, NormMode::Batch);
        let xi = fx.g.input(x);
        let logits = forward(&mut fx, xi)?;
        (fx.g.cross_entropy_spatial(logits, labels, None)?, logits)
    };
    Ok((g, loss, logits))
}

pub(crate) fn divergence(epoch: usize, minibatch: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        minibatch,
        detail: detail.into(),
    }
}

/// Forward, backward and gradient accumulation; fails on a non-finite loss
/// or gradient.
fn compute_grads<F>(
    store: &mut ParamStore,
    split: Split,
    x: Tensor4,
    labels: &[u8],
    group: ParamGroup,
    at: (usize, usize),
    forward: F,
) -> Result<SplitGrads>
where
    F: FnOnce(&mut Fwd, NodeId) -> Result<NodeId>,
{
    let (mut g, loss, _) = batch_loss(store, x, labels, forward)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(divergence(at.0, at.1, format!("loss is {value}")));
    }
    g.backward(loss)?;
    store.zero_grads();
    g.accumulate_param_grads(store);
    let norm = store.grad_norm(group);
    if !norm.is_finite() {
        return Err(divergence(at.0, at.1, format!("gradient norm is {norm}")));
    }
    Ok(SplitGrads { split, loss: value })
}

/// Random crop offsets for `n` images.
pub(crate) fn crop_offsets(
    rng: &mut ChaCha8Rng,
    n: usize,
    size: usize,
    crop: usize,
) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| {
            (
                rng.gen_range(0..=size - crop),
                rng.gen_range(0..=size - crop),
            )
        })
        .collect()
}

/// Loss and confusion over `idx` evaluated in minibatches at full size.
pub(crate) fn evaluate<F>(
    store: &ParamStore,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
    mut forward: F,
) -> Result<(f64, ConfusionMatrix)>
where
    F: FnMut(&mut Fwd, NodeId) -> Result<NodeId>,
{
    let mut cm = ConfusionMatrix::new(data.num_classes, None);
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch(chunk, data.size, &vec![(0, 0); chunk.len()])?;
        let (g, loss, logits) = batch_loss(store, x, &labels, &mut forward)?;
        loss_sum += g.value(loss).data()[0];
        batches += 1;
        cm.add(&argmax_labels(g.value(logits)), &labels)?;
    }
    Ok((loss_sum / batches.max(1) as f64, cm))
}

fn check_data(config: &SearchConfig, data: &Dataset) -> Result<()> {
    if data.num_classes != config.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, config expects {}",
            data.num_classes, config.num_classes
        )));
    }
    if config.crop_size > data.size {
        return Err(Error::invalid(format!(
            "crop {} larger than images of size {}",
            config.crop_size, data.size
        )));
    }
    Ok(())
}

pub fn run_search(config: &SearchConfig, data: &Dataset) -> Result<SearchOutcome> {
    run_search_observed(config, data, &mut |_, _, _| {})
}

/// Bi-level search: per trainA minibatch one momentum-SGD step on the
/// weights, then (from epoch `arch_delay_epochs + 1` on) one Adam step on
/// α and β using the next trainB minibatch.
pub fn run_search_observed(
    config: &SearchConfig,
    data: &Dataset,
    observer: &mut StepObserver,
) -> Result<SearchOutcome> {
    config.validate()?;
    check_data(config, data)?;
    let (train_a, train_b) = split_indices(data.len(), config.seed)?;
    let mut store = ParamStore::new();
    let net = SuperNet::new(config.net_config(), &mut store, config.seed)?;
    let initial_snapshot = net.snapshot(&store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);

    let sgd = SgdMomentum {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let adam = Adam::new(config.arch_lr, config.arch_weight_decay);
    let steps_per_epoch = train_a.len().div_ceil(config.batch_size);
    let last_step = (config.epochs * steps_per_epoch).saturating_sub(1);
    let b_batches = train_b.len().div_ceil(config.batch_size);

    let mut counters = UpdateCounters::default();
    let mut weight_lrs = Vec::with_capacity(last_step + 1);
    let mut trace = SearchTrace::default();
    let mut order_a = train_a.clone();
    let mut order_b = train_b.clone();
    let mut b_cursor = b_batches;

    for epoch in 1..=config.epochs {
        order_a.shuffle(&mut rng);
        let arch_active = epoch > config.arch_delay_epochs;
        let mut loss_sum = 0.0;
        let mut lr = config.lr_max;
        for (mb, chunk) in order_a.chunks(config.batch_size).enumerate() {
            let offsets = crop_offsets(&mut rng, chunk.len(), data.size, config.crop_size);
            let (x, labels) = data.batch(chunk, config.crop_size, &offsets)?;
            let grads = compute_grads(
                &mut store,
                Split::A,
                x,
                &labels,
                ParamGroup::Weights,
                (epoch, mb),
                |fx, xi| Ok(net.forward(fx, xi)?.logits),
            )?;
            loss_sum += grads.loss;
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut store, ParamGroup::Weights, c);
            }
            lr = cosine_lr(weight_lrs.len(), last_step, config.lr_max, config.lr_min)?;
            sgd.step(&mut store, ParamGroup::Weights, lr);
            weight_lrs.push(lr);
            counters.record(ParamGroup::Weights, grads.split);
            observer(
                &StepEvent {
                    epoch,
                    minibatch: mb,
                    group: ParamGroup::Weights,
                },
                &net,
                &store,
            );

            if arch_active {
                if b_cursor == b_batches {
                    order_b.shuffle(&mut rng);
                    b_cursor = 0;
                }
                let chunk_b = order_b
                    .chunks(config.batch_size)
                    .nth(b_cursor)
                    .expect("cursor within trainB batches");
                b_cursor += 1;
                let offsets = crop_offsets(&mut rng, chunk_b.len(), data.size, config.crop_size);
                let (x, labels) = data.batch(chunk_b, config.crop_size, &offsets)?;
                let grads = compute_grads(
                    &mut store,
                    Split::B,
                    x,
                    &labels,
                    ParamGroup::Architecture,
                    (epoch, mb),
                    |fx, xi| Ok(net.forward(fx, xi)?.logits),
                )?;
                if let Some(c) = config.grad_clip {
                    clip_grad_norm(&mut store, ParamGroup::Architecture, c);
                }
                adam.step(&mut store, ParamGroup::Architecture);
                counters.record(ParamGroup::Architecture, grads.split);
                observer(
                    &StepEvent {
                        epoch,
                        minibatch: mb,
                        group: ParamGroup::Architecture,
                    },
                    &net,
                    &store,
                );
            }
        }
        let (loss_b, cm) = evaluate(&store, data, &train_b, config.batch_size, |fx, xi| {
            Ok(net.forward(fx, xi)?.logits)
        })?;
        if !loss_b.is_finite() {
            return Err(divergence(
                epoch,
                steps_per_epoch,
                format!("trainB loss is {loss_b}"),
            ));
        }
        let snap = net.snapshot(&store)?;
        trace.records.push(EpochRecord {
            epoch,
            loss_a: loss_sum / steps_per_epoch as f64,
            loss_b,
            miou: cm.miou()?,
            pixel_accuracy: cm.pixel_accuracy()?,
            lr,
            alpha_entropy: alpha_entropy(&normalize_alpha(&snap.alpha)?),
            beta_entropy: beta_entropy(&normalize_beta(&snap.beta)?),
        });
    }
    store.zero_grads();
    let snapshot = net.snapshot(&store)?;
    Ok(SearchOutcome {
        trace,
        initial_snapshot,
        snapshot,
        store,
        counters,
        weight_lrs,
    })
}

/// Repeated weight steps on one fixed minibatch of whole images; returns
/// the loss before each step. The schedule spans the `steps` updates.
pub fn fixed_minibatch_losses(
    config: &SearchConfig,
    data: &Dataset,
    idx: &[usize],
    steps: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_data(config, data)?;
    let mut store = ParamStore::new();
    let net = SuperNet::new(config.net_config(), &mut store, config.seed)?;
    let sgd = SgdMomentum {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let (x, labels) = data.batch(idx, data.size, &vec![(0, 0); idx.len()])?;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let grads = compute_grads(
            &mut store,
            Split::A,
            x.clone(),
            &labels,
            ParamGroup::Weights,
            (1, step),
            |fx, xi| Ok(net.forward(fx, xi)?.logits),
        )?;
        losses.push(grads.loss);
        if let Some(c) = config.grad_clip {
            clip_grad_norm(&mut store, ParamGroup::Weights, c);
        }
        sgd.step(
            &mut store,
            ParamGroup::Weights,
            cosine_lr(step, steps.saturating_sub(1), config.lr_max, config.lr_min)?,
        );
    }
    Ok(losses)
}
