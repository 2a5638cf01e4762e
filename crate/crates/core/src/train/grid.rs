//! Exhaustive hyperparameter search with a persisted leaderboard.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blurpool::BlurPoolSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ElNet, ModelConfig};
use crate::msnorm::NormVariant;

use super::{train, TrainConfig};

/// Axes of the grid; the search covers their cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub norm: Vec<NormVariant>,
    /// Uniform BlurPool kernel size per point.
    pub blur: Vec<usize>,
    pub dropout: Vec<f64>,
    /// Used as both the initialization and the training seed.
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// A one-point grid holding the base settings.
    pub fn single(model: &ModelConfig, train: &TrainConfig) -> Self {
        GridSpec {
            lr: vec![train.optimizer.lr()],
            norm: vec![model.norm],
            blur: vec![model.blur.kernels[0]],
            dropout: vec![model.dropout],
            seeds: vec![train.seed],
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &norm in &self.norm {
                for &blur in &self.blur {
                    for &dropout in &self.dropout {
                        for &seed in &self.seeds {
                            out.push(GridPoint {
                                lr,
                                norm,
                                blur,
                                dropout,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub norm: NormVariant,
    pub blur: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl GridPoint {
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            norm: self.norm,
            blur: BlurPoolSpec::uniform(self.blur),
            dropout: self.dropout,
            seed: self.seed,
            ..model.clone()
        };
        let t = TrainConfig {
            optimizer: train.optimizer.with_lr(self.lr),
            seed: self.seed,
            ..train.clone()
        };
        (m, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    /// 1-based; failed points rank after every completed one.
    pub rank: usize,
    #[serde(flatten)]
    pub point: GridPoint,
    pub auc: Option<f64>,
    pub mcc: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// Sorted by rank.
    pub leaderboard: Vec<LeaderboardRow>,
    /// Resolved configs of the winner, if any point completed.
    pub best: Option<(ModelConfig, TrainConfig)>,
}

/// Descending AUC, then descending MCC, then ascending learning rate.
fn compare(a: &LeaderboardRow, b: &LeaderboardRow) -> Ordering {
    let key = |r: &LeaderboardRow| (r.error.is_some(), r.auc.unwrap_or(f64::NEG_INFINITY), r.mcc.unwrap_or(f64::NEG_INFINITY));
    let (ea, aa, ma) = key(a);
    let (eb, ab, mb) = key(b);
    ea.cmp(&eb)
        .then(ab.total_cmp(&aa))
        .then(mb.total_cmp(&ma))
        .then(a.point.lr.total_cmp(&b.point.lr))
}

/// Trains one model per grid point (points in parallel) and ranks them on
/// `val_set` by the final-epoch metrics. A point that fails is recorded
/// with its error and does not affect the others.
pub fn grid_search(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &GridSpec,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<GridResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::invalid("grid has no points"));
    }
    let mut rows: Vec<LeaderboardRow> = points
        .par_iter()
        .map(|point| {
            let (m, t) = point.apply(model, train_cfg);
            let outcome = ElNet::new(m).and_then(|net| train(net, train_set, Some(val_set), &t));
            match outcome {
                Ok((_, history)) => {
                    let last = history.epochs.last().expect("at least one epoch");
                    let val = last.val.as_ref();
                    LeaderboardRow {
                        rank: 0,
                        point: *point,
                        auc: val.and_then(|v| v.roc_auc),
                        mcc: val.map(|v| v.mcc),
                        final_loss: Some(last.train_loss),
                        error: None,
                    }
                }
                Err(e) => LeaderboardRow {
                    rank: 0,
                    point: *point,
                    auc: None,
                    mcc: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    // stable sort: fully tied points keep grid order
    rows.sort_by(compare);
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    let best = rows.first().filter(|r| r.error.is_none()).map(|r| r.point.apply(model, train_cfg));
    Ok(GridResult {
        leaderboard: rows,
        best,
    })
}

pub fn write_leaderboard(path: impl AsRef<Path>, rows: &[LeaderboardRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "lr", "norm", "blur", "dropout", "seed", "auc", "mcc", "final_loss", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.rank.to_string(),
            r.point.lr.to_string(),
            r.point.norm.as_str().to_string(),
            r.point.blur.to_string(),
            r.point.dropout.to_string(),
            r.point.seed.to_string(),
            opt(r.auc),
            opt(r.mcc),
            opt(r.final_loss),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lr: f64, auc: Option<f64>, mcc: Option<f64>, error: bool) -> LeaderboardRow {
        LeaderboardRow {
            rank: 0,
            point: GridPoint {
                lr,
                norm: NormVariant::Layer,
                blur: 3,
                dropout: 0.5,
                seed: 0,
            },
            auc,
            mcc,
            final_loss: None,
            error: error.then(|| "boom".into()),
        }
    }

    #[test]
    fn ranking_rule() {
        let mut rows = vec![
            row(1e-3, Some(0.8), Some(0.5), false),
            row(1e-4, None, None, true),
            row(1e-4, Some(0.9), Some(0.1), false),
            row(1e-2, Some(0.9), Some(0.4), false),
            row(1e-5, Some(0.9), Some(0.4), false),
        ];
        rows.sort_by(compare);
        let lrs: Vec<f64> = rows.iter().map(|r| r.point.lr).collect();
        assert_eq!(lrs, vec![1e-5, 1e-2, 1e-4, 1e-3, 1e-4]);
        assert!(rows.last().unwrap().error.is_some());
    }

    #[test]
    fn cartesian_points() {
        let g = GridSpec {
            lr: vec![1e-3, 1e-4],
            norm: vec![NormVariant::Layer, NormVariant::Contrast],
            blur: vec![3],
            dropout: vec![0.5],
            seeds: (0..5).collect(),
        };
        assert_eq!(g.points().len(), 20);
        let single = GridSpec::single(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(single.points().len(), 1);
    }
}
