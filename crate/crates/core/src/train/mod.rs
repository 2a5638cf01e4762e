//! Training loop, evaluation, cross-validation splits and grid search.

mod grid;
mod kfold;
pub mod metrics;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::augment;
use crate::data::{oversample_indices, resize_volume, AugmentSpec, Dataset, Orientation, StandardScale, Volume};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ElNet, ForwardOptions};
use crate::seed;
use crate::tensor::{Graph, Tensor};

pub use grid::{grid_search, write_leaderboard, GridPoint, GridResult, GridSpec, LeaderboardRow};
pub use kfold::{stratified_kfold, FoldPlan};
pub use metrics::{mcc, roc_auc, roc_curve, MetricsReport};
pub use optim::{Optimizer, OptimizerConfig};

/// Checkpoint metadata key holding the standard intensity scale.
pub const SCALE_KEY: &str = "standard_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Drives sampling order, augmentation and dropout.
    pub seed: u64,
    /// Balance the classes every epoch by redrawing minority exams.
    pub oversample: bool,
    pub augment: AugmentSpec,
    /// Label set to train against; informational for the library.
    pub pathology: String,
    /// Every training volume must have this orientation.
    pub orientation: Orientation,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::adam(1e-4),
            epochs: 30,
            seed: 0,
            oversample: true,
            augment: AugmentSpec::default(),
            pathology: "lesion".into(),
            orientation: Orientation::Axial,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// A network together with the intensity scale its inputs must be mapped to.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub net: ElNet,
    pub scale: StandardScale,
}

impl Classifier {
    /// Standardizes, resizes and lays out one raw volume for the network.
    pub fn prepare(&self, volume: &Volume) -> Result<Tensor<f32>> {
        Ok(resize_volume(&self.scale.apply(volume)?, self.net.config().input)?.to_input())
    }

    /// Positive-class probability of one raw volume.
    pub fn score_volume(&self, volume: &Volume) -> Result<f64> {
        Ok(self.net.predict(&self.prepare(volume)?)?[1] as f64)
    }

    pub fn checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.clone());
        ck.metadata.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        ck.metadata.insert(SCALE_KEY.into(), self.scale.to_string());
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &BTreeMap<String, String>) -> Result<()> {
        self.checkpoint(extra).save(path)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let scale = ck
            .metadata
            .get(SCALE_KEY)
            .ok_or_else(|| Error::format("checkpoint carries no intensity scale"))?
            .parse()?;
        Ok(Classifier { net: ck.model, scale })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Classifier::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Anything that maps a raw volume to a positive-class score.
pub trait Scorer: Sync {
    fn score(&self, volume: &Volume) -> Result<f64>;
}

impl Scorer for Classifier {
    fn score(&self, volume: &Volume) -> Result<f64> {
        self.score_volume(volume)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<f64>,
}

/// Scores every exam (in parallel, order-independent) and summarizes.
pub fn evaluate<S: Scorer + ?Sized>(model: &S, data: &Dataset, threshold: f64) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let scores = data.volumes.par_iter().map(|v| model.score(v)).collect::<Result<Vec<f64>>>()?;
    Ok(Evaluation {
        report: MetricsReport::from_scores(&scores, &data.labels, threshold)?,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's steps.
    pub train_loss: f64,
    pub steps: usize,
    pub positives: usize,
    pub negatives: usize,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    steps: usize,
    positives: usize,
    negatives: usize,
    val_auc: Option<f64>,
    val_mcc: Option<f64>,
    val_accuracy: Option<f64>,
    val_sensitivity: Option<f64>,
    val_specificity: Option<f64>,
}

impl History {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            let v = e.val.as_ref();
            w.serialize(HistoryRow {
                epoch: e.epoch,
                train_loss: e.train_loss,
                steps: e.steps,
                positives: e.positives,
                negatives: e.negatives,
                val_auc: v.and_then(|r| r.roc_auc),
                val_mcc: v.map(|r| r.mcc),
                val_accuracy: v.map(|r| r.accuracy),
                val_sensitivity: v.map(|r| r.sensitivity),
                val_specificity: v.map(|r| r.specificity),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Trains `net` on `train_set`, one exam per optimizer step, and reports
/// validation metrics after every epoch when `val_set` is given.
pub fn train(net: ElNet, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Classifier, History)> {
    train_with_progress(net, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress(
    mut net: ElNet,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Classifier, History)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(v) = train_set.volumes.iter().find(|v| v.orientation != cfg.orientation) {
        return Err(Error::invalid(format!(
            "exam {} is {}, expected {}",
            v.id,
            v.orientation.as_str(),
            cfg.orientation.as_str()
        )));
    }
    let scale = StandardScale::learn(&train_set.volumes)?;
    let target = net.config().input;
    let val_inputs = match val_set {
        Some(v) if !v.is_empty() => Some(
            v.volumes
                .par_iter()
                .map(|x| Ok(resize_volume(&scale.apply(x)?, target)?.to_input()))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order = if cfg.oversample {
            oversample_indices(&train_set.labels, seed::derive(cfg.seed, &[e, 0]))?
        } else {
            (0..train_set.len()).collect()
        };
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[e, 1])));

        let mut total = 0.0;
        for (step, &idx) in order.iter().enumerate() {
            let s = step as u64;
            let label = train_set.labels[idx] as usize;
            let v = augment(&train_set.volumes[idx], &cfg.augment, seed::derive(cfg.seed, &[e, 2, s]))?;
            let x = resize_volume(&scale.apply(&v)?, target)?.to_input();

            let diverged = |err| match err {
                Error::NonFinite(_) => Error::Diverged { epoch: epoch + 1, loss: f64::NAN },
                other => other,
            };
            let mut g = Graph::<f32>::new();
            let out = net
                .forward(&mut g, x, &ForwardOptions::train(seed::derive(cfg.seed, &[e, 3, s])))
                .map_err(diverged)?;
            let loss = g.cross_entropy(out.probs, label)?;
            let value = g.value(loss).item()? as f64;
            // the probability floor hides non-finite logits from the loss
            if !value.is_finite() || !g.value(out.logits).is_finite() {
                let loss = if g.value(out.logits).is_finite() { value } else { f64::NAN };
                return Err(Error::Diverged { epoch: epoch + 1, loss });
            }
            total += value;
            g.backward(loss).map_err(diverged)?;
            let grads: Vec<Vec<f32>> = out
                .params
                .iter()
                .zip(net.params())
                .map(|(var, p)| g.take_grad(*var).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            if grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { epoch: epoch + 1, loss: f64::NAN });
            }
            opt.step(net.params_mut(), &grads)?;
            if !out.batch_stats.is_empty() {
                net.update_running(&out.batch_stats);
            }
        }

        let val = match (&val_inputs, val_set) {
            (Some(inputs), Some(v)) => {
                let scores = inputs
                    .par_iter()
                    .map(|x| Ok(net.predict(x)?[1] as f64))
                    .collect::<Result<Vec<f64>>>()?;
                Some(MetricsReport::from_scores(&scores, &v.labels, cfg.threshold)?)
            }
            _ => None,
        };
        let positives = order.iter().filter(|&&i| train_set.labels[i] == 1).count();
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / order.len() as f64,
            steps: order.len(),
            positives,
            negatives: order.len() - positives,
            val,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((Classifier { net, scale }, history))
}
