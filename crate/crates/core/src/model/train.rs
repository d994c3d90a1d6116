//! Mini-batch training with Adam, a halving learning-rate schedule, and
//! deterministic shuffling/augmentation keyed off the run seed.
//!
//! Every random choice is drawn from a generator derived per epoch, so a
//! run resumed from a checkpoint at epoch k continues bit-for-bit like an
//! uninterrupted run (optimizer moments and step count live in the store).

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capture::FusionGroup;
use crate::metrics::{psnr_mu, MetricsError};
use crate::model::config::EafnetConfig;
use crate::model::loss::attach_loss;
use crate::model::network::Eafnet;
use crate::model::ModelError;
use crate::radiometry::{
    build_input_stack, mu_expand, HdrImage, ImageBuf, NetworkInputStack, RadiometryError,
};
use crate::scalar::Scalar;
use crate::seed::derive_rng;
use crate::tensor::{rot90_chw, AdamConfig, Array, Graph, ParamStore, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training stops once the scheduled rate falls below this.
    pub lr_floor: f64,
    /// Number of trailing groups held out for validation.
    pub holdout: usize,
    /// Random quarter-turn rotations of each sample.
    pub augment: bool,
    /// Validation cadence in epochs (the final epoch always validates).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr: 1e-4,
            lr_floor: 1e-6,
            holdout: 8,
            augment: true,
            val_every: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_psnr_mu: Option<f64>,
}

pub struct TrainOutcome<T: Scalar> {
    pub params: ParamStore<T>,
    pub history: Vec<EpochRecord>,
    pub stopped_at_lr_floor: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training groups supplied")]
    NoTrainingData,
    #[error("group {0} has no ground truth")]
    MissingGroundTruth(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct Sample<T: Scalar> {
    stack: NetworkInputStack<T>,
    target: Array<T>,
}

fn build_samples<T: Scalar>(
    cfg: &EafnetConfig,
    groups: &[FusionGroup<T>],
    white_point: f64,
) -> Result<Vec<Sample<T>>, TrainError> {
    groups
        .iter()
        .enumerate()
        .map(|(i, group)| {
            let gt = group.ground_truth.as_ref().ok_or(TrainError::MissingGroundTruth(i))?;
            let target = gt.scale(1.0 / white_point)?.buf().to_array();
            let stack =
                build_input_stack(group, cfg.alignment(), white_point, cfg.exposure_scale)?;
            Ok(Sample { stack, target })
        })
        .collect()
}

fn augmented<T: Scalar>(s: &Sample<T>, k: usize) -> (NetworkInputStack<T>, Array<T>) {
    if k % 4 == 0 {
        return (s.stack.clone(), s.target.clone());
    }
    let stack = NetworkInputStack {
        branches: [
            rot90_chw(&s.stack.branches[0], k),
            rot90_chw(&s.stack.branches[1], k),
            rot90_chw(&s.stack.branches[2], k),
        ],
        e_low: s.stack.e_low,
        e_high: s.stack.e_high,
    };
    (stack, rot90_chw(&s.target, k))
}

fn validation_psnr<T: Scalar>(
    net: &Eafnet,
    store: &ParamStore<T>,
    val: &[Sample<T>],
    mu: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in val {
        let g = Graph::new();
        let ids = net.bind_params(&g, store, false)?;
        let fwd = net.forward_graph(&g, &ids, &s.stack)?;
        // Expand the compressed head output exactly as inference does, so
        // this score matches what a caller measures on `infer` results.
        let buf = ImageBuf::from_array(&g.value(fwd.output))?
            .map(|v| T::cast(mu_expand(v.as_f64(), mu)));
        let out = HdrImage::new(buf)?;
        let tgt = HdrImage::new(ImageBuf::from_array(&s.target)?)?;
        total += psnr_mu(&out, &tgt, mu)?;
    }
    Ok(total / val.len() as f64)
}

/// Trains `store` in place over `groups` and returns it with the epoch
/// history. The trailing `holdout` groups are reserved for validation.
/// `start_epoch` continues a schedule from a checkpointed state; the
/// callback sees each finished epoch together with the current weights.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    net: &Eafnet,
    tcfg: &TrainConfig,
    groups: &[FusionGroup<T>],
    white_point: f64,
    mut store: ParamStore<T>,
    start_epoch: usize,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<T>),
) -> Result<TrainOutcome<T>, TrainError> {
    net.validate_store(&store)?;
    let cfg = net.config();
    let samples = build_samples(cfg, groups, white_point)?;
    let holdout = tcfg.holdout.min(samples.len().saturating_sub(1));
    let (train_set, val_set) = samples.split_at(samples.len() - holdout);
    if train_set.is_empty() {
        return Err(TrainError::NoTrainingData);
    }

    let halving = (tcfg.epochs / 5).max(1);
    let lr_at = |epoch: usize| tcfg.lr * 0.5f64.powi((epoch / halving) as i32);
    let mut history = Vec::new();
    let mut stopped_at_lr_floor = false;
    for epoch in start_epoch..tcfg.epochs {
        let lr = lr_at(epoch);
        if lr < tcfg.lr_floor {
            stopped_at_lr_floor = true;
            break;
        }

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng(seed, &format!("train/shuffle/{epoch}")));
        let mut aug_rng = derive_rng(seed, &format!("train/augment/{epoch}"));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut accum: BTreeMap<String, Array<T>> = BTreeMap::new();
            let inv = T::cast(1.0 / batch.len() as f64);
            for &si in batch {
                let turns = if tcfg.augment { aug_rng.random_range(0..4) } else { 0 };
                let (stack, target) = augmented(&train_set[si], turns);
                let g = Graph::new();
                let ids = net.bind_params(&g, &store, true)?;
                let fwd = net.forward_graph(&g, &ids, &stack)?;
                let target_id = g.input(target)?;
                let loss = attach_loss(&g, fwd.output, target_id, cfg)?;
                let loss_value = g.value(loss.total).first().as_f64();
                if !loss_value.is_finite() {
                    return Err(TrainError::Diverged { epoch, loss: loss_value });
                }
                epoch_loss += loss_value;
                let mut grads = g.backward(loss.total)?;
                for (name, id) in &ids {
                    if let Some(mut grad) = grads.take(*id) {
                        grad.scale_assign(inv);
                        match accum.entry(name.clone()) {
                            Entry::Occupied(mut e) => e.get_mut().add_assign(&grad),
                            Entry::Vacant(e) => {
                                e.insert(grad);
                            }
                        }
                    }
                }
            }
            store.adam_step(&accum, &AdamConfig { lr, ..AdamConfig::default() })?;
        }
        epoch_loss /= train_set.len() as f64;

        // The floor can end the run before the nominal last epoch, so peek
        // ahead: the final finished epoch always gets a validation score.
        let is_last = epoch + 1 == tcfg.epochs || lr_at(epoch + 1) < tcfg.lr_floor;
        let validate_now =
            !val_set.is_empty() && (epoch % tcfg.val_every.max(1) == 0 || is_last);
        let val_psnr_mu = if validate_now {
            Some(validation_psnr(net, &store, val_set, cfg.mu)?)
        } else {
            None
        };

        let record = EpochRecord { epoch, loss: epoch_loss, lr, val_psnr_mu };
        on_epoch(&record, &store);
        history.push(record);
    }
    Ok(TrainOutcome { params: store, history, stopped_at_lr_floor })
}
