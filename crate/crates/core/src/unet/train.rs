//! Mini-batch Adam-style training and tile prediction.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{backward_scaled, forward, ModelParams, UNetConfig};
use crate::dataset::{denormalize_pg, model_input, Sample};
use crate::geodata::GridTile;
use crate::propagate::{Generator, Heatmap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of samples held out to report a validation loss.
    pub validation_fraction: f64,
    pub arch: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            validation_fraction: 0.0,
            arch: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::domain("validation fraction must lie in [0, 1)"));
        }
        self.arch.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Masked MSE over all training pixels seen during the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Adam moments (0.9 / 0.999, eps 1e-8) in double precision, with the
/// running maximum of the second moment as step normaliser (AMSGrad), which
/// keeps the effective step from growing once gradients shrink.
struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_max: Vec<Vec<f64>>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (a, arr) in params.arrays.iter_mut().enumerate() {
            for (k, p) in arr.data.iter_mut().enumerate() {
                let g = grads[a][k];
                let m = &mut self.m[a][k];
                let v = &mut self.v[a][k];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                let vh = &mut self.v_max[a][k];
                *vh = vh.max(*v / c2);
                let step = self.lr * (*m / c1) / (vh.sqrt() + Self::EPS);
                *p = (f64::from(*p) - step) as f32;
            }
        }
    }
}

struct Prepared {
    input: Vec<f32>,
    target: Vec<f32>,
    mask: Vec<bool>,
    valid: usize,
}

fn prepare(samples: &[&Sample], tile_px: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            if s.size_px() != tile_px {
                return Err(Error::Shape(format!(
                    "sample is {}px but the model expects {tile_px}px",
                    s.size_px()
                )));
            }
            Ok(Prepared {
                input: s.model_input(),
                target: s.target_f32(),
                mask: s.mask.clone(),
                valid: s.mask.iter().filter(|m| **m).count(),
            })
        })
        .collect()
}

/// Summed loss and gradient of a batch. Per-sample work runs in parallel
/// and is reduced in batch order, so the result does not depend on the
/// thread count.
fn batch_gradient(params: &ModelParams, batch: &[&Prepared]) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let total: usize = batch.iter().map(|p| p.valid).sum();
    if total == 0 {
        return Ok(None);
    }
    let parts: Vec<(f32, Vec<Vec<f32>>)> = batch
        .par_iter()
        .filter(|p| p.valid > 0)
        .map(|p| {
            backward_scaled(params, &p.input, &p.target, &p.mask, total as f64)
                .map(|(_, loss, g)| (loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grads: Vec<Vec<f64>> = params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += f64::from(l);
        for (acc, part) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += f64::from(*b);
            }
        }
    }
    Ok(Some((loss, grads)))
}

/// Masked MSE of `params` pooled over every valid pixel of `samples`.
pub fn evaluate_loss(params: &ModelParams, samples: &[&Sample]) -> Result<f64> {
    let prepared = prepare(samples, params.config().tile_px)?;
    let per: Vec<(f64, usize)> = prepared
        .par_iter()
        .map(|p| {
            let pred = forward(params, &p.input)?;
            let mut s = 0.0;
            for k in 0..pred.len() {
                if p.mask[k] {
                    let d = f64::from(pred[k]) - f64::from(p.target[k]);
                    s += d * d;
                }
            }
            Ok((s, p.valid))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    if n == 0 {
        return Err(Error::domain("no valid pixels to evaluate"));
    }
    Ok(sum / n as f64)
}

/// Trains a freshly initialised network.
pub fn train(samples: &[&Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = ModelParams::init(&cfg.arch, cfg.seed)?;
    train_from(init, samples, cfg)
}

/// Continues training `params`; `cfg.arch` is ignored in favour of the
/// architecture stored in the parameters.
pub fn train_from(mut params: ModelParams, samples: &[&Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared = prepare(samples, params.config().tile_px)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let n_val = (cfg.validation_fraction * prepared.len() as f64).round() as usize;
    let n_val = n_val.min(prepared.len() - 1);
    let val_idx: Vec<usize> = if n_val > 0 {
        order.shuffle(&mut rng);
        let v = order.split_off(order.len() - n_val);
        order.sort_unstable();
        v
    } else {
        Vec::new()
    };
    let val_samples: Vec<&Sample> = val_idx.iter().map(|i| samples[*i]).collect();

    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut pixels = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|i| &prepared[*i]).collect();
            let Some((loss, grads)) = batch_gradient(&params, &batch)? else {
                continue;
            };
            let valid: usize = batch.iter().map(|p| p.valid).sum();
            sum += loss * valid as f64;
            pixels += valid;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::domain(format!("non-finite gradient in epoch {epoch}")));
            }
            adam.update(&mut params, &grads);
        }
        if pixels == 0 {
            return Err(Error::domain("training samples have no valid pixels"));
        }
        let val_loss = if val_samples.is_empty() {
            None
        } else {
            Some(evaluate_loss(&params, &val_samples)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: sum / pixels as f64,
            val_loss,
        };
        log::debug!("epoch {epoch}: train {:.6e}", stats.train_loss);
        history.push(stats);
    }
    params.meta.training_epochs += cfg.epochs;
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub heatmap: Heatmap,
    /// Wall-clock time of the forward pass.
    pub latency: Duration,
}

/// Predicts a dB heatmap from an elevation tile (metres) and a normalized
/// rough-estimate tile. The result is valid where both inputs are.
pub fn predict(params: &ModelParams, elevation: &GridTile, estimate: &GridTile) -> Result<Prediction> {
    let n = params.config().tile_px;
    if elevation.size_px != n || estimate.size_px != n {
        return Err(Error::Shape(format!(
            "model expects {n}px tiles, got {} and {}",
            elevation.size_px, estimate.size_px
        )));
    }
    let mask: Vec<bool> = elevation.mask.iter().zip(&estimate.mask).map(|(a, b)| *a && *b).collect();
    let input = model_input(elevation, estimate, &mask);
    let start = Instant::now();
    let out = forward(params, &input)?;
    let latency = start.elapsed();
    let mut tile = GridTile::new(
        n,
        estimate.cell_size_m,
        out.iter().map(|v| denormalize_pg(f64::from(*v))).collect(),
        mask,
    )?;
    tile.zero_invalid();
    Ok(Prediction {
        heatmap: Heatmap {
            tile,
            generator: Generator::Model,
        },
        latency,
    })
}

/// Prediction for a stored sample.
pub fn predict_sample(params: &ModelParams, sample: &Sample) -> Result<Prediction> {
    predict(params, &sample.elevation, &sample.estimate)
}
