//! Mini-batch optimisation with Adam, global-norm clipping, plateau
//! learning-rate decay and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::nn::{Forecaster, ModelError};
use crate::numerics::{mse, Graph, Tensor};
use crate::series_io::WindowedDataset;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("dataset windows have length {dataset}, model expects {model}")]
    WindowMismatch { dataset: usize, model: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("parameter {index}: gradient shape {grad:?} does not match {param:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; best weights restored")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        report: Box<TrainReport>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub clip_max_norm: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    /// Minimum decrease of the validation loss that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::xlstm()
    }
}

impl TrainConfig {
    pub fn xlstm() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            early_stop_patience: 30,
            clip_max_norm: 1.0,
            scheduler_factor: 0.5,
            scheduler_patience: 10,
            min_delta: 1e-9,
            seed: 0,
        }
    }

    pub fn tcn() -> Self {
        Self {
            batch_size: 256,
            early_stop_patience: 10,
            ..Self::xlstm()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.early_stop_patience > 0
            && self.clip_max_norm > 0.0
            && self.scheduler_factor > 0.0
            && self.scheduler_factor <= 1.0
            && self.scheduler_patience > 0
            && self.min_delta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{self:?}")))
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TrainError::Shape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { index });
            }
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most
/// `max_norm`; returns the factor applied (1 when untouched).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
        s
    } else {
        1.0
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch; returns whether the rate was reduced.
    pub fn observe(&mut self, improved: bool) -> bool {
        if improved {
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss,lr` with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Vec<EpochRecord>, String> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        rdr.records()
            .map(|r| {
                let r = r.map_err(|e| e.to_string())?;
                let f = |i: usize| r.get(i).ok_or_else(|| format!("missing column {i}"));
                let num = |i: usize| f(i)?.parse::<f64>().map_err(|e| e.to_string());
                Ok(EpochRecord {
                    epoch: f(0)?.parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
                    train_loss: num(1)?,
                    val_loss: num(2)?,
                    lr: num(3)?,
                })
            })
            .collect()
    }

    /// Human-readable summary; the wall-clock line is last.
    pub fn summary(&self) -> String {
        format!(
            "epochs_run: {}\nstopped_epoch: {}\nbest_epoch: {}\nbest_val_loss: {}\nwall_clock_seconds: {:.3}\n",
            self.epochs.len(),
            self.stopped_epoch,
            self.best_epoch,
            self.best_val_loss,
            self.wall_clock_seconds
        )
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Mean squared error of `model` on every window of `data`.
pub fn evaluate_mse(model: &dyn Forecaster, data: &WindowedDataset, exec: Execution) -> Result<f64, ModelError> {
    let inputs: Vec<f64> = data.inputs().flatten().copied().collect();
    let preds = model.predict(&inputs, exec)?;
    let sse: f64 = preds.iter().zip(data.targets()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / data.len() as f64)
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the lowest validation loss.
pub fn fit(
    model: &mut dyn Forecaster,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    for d in [train, val] {
        if d.window_length() != model.window_length() {
            return Err(TrainError::WindowMismatch {
                dataset: d.window_length(),
                model: model.window_length(),
            });
        }
    }
    let started = Instant::now();
    let l = model.window_length();
    let mut adam = Adam::new(model.params().values());
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience);
    let mut best = model.params().clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        wall_clock_seconds: 0.0,
    };
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sse = 0.0;
        for (bi, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys) = train.gather(rows);
            let g = Graph::with_execution(exec);
            let p = model.params().bind(&g, true);
            let x = g.constant(Tensor::new(vec![rows.len(), l, 1], xs).expect("gathered windows"));
            let y = g.constant(Tensor::new(vec![rows.len(), 1], ys).expect("gathered targets"));
            let pred = model.forward(&g, &p, x)?;
            let loss = mse(&g, pred, y).map_err(ModelError::from)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                *model.params_mut() = best;
                report.stopped_epoch = epoch;
                report.wall_clock_seconds = started.elapsed().as_secs_f64();
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    report: Box::new(report),
                });
            }
            g.backward(loss).map_err(ModelError::from)?;
            let mut grads = model.params().gradients(&g, &p);
            clip_gradients(&mut grads, cfg.clip_max_norm);
            adam.step(model.params_mut().values_mut(), &grads, lr)?;
            sse += value * rows.len() as f64;
        }
        let train_loss = sse / train.len() as f64;
        let val_loss = evaluate_mse(model, val, exec)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        report.stopped_epoch = epoch;
        let improved = val_loss < report.best_val_loss - cfg.min_delta;
        if improved {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        sched.observe(improved);
        if since_best >= cfg.early_stop_patience {
            break;
        }
    }
    *model.params_mut() = best;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
