//! Adam, per-microbatch clipping with Gaussian noise (DP-SGD), and the
//! minibatch training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{invalid, shape, Error, Result};
use crate::neural::model::{accumulate_gradients, forward_with_fingerprint};
use crate::neural::{GradientSet, ModelParams, ModelSpec};
use crate::numeric::RngStream;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

/// Moment estimates of Adam.
///
/// The update is `θ ← θ − η_t·m/(√v + ε̂)` with
/// `η_t = η·√(1 − β2^t)/(1 − β1^t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: &mut ModelParams, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        let n = params.tensors().len();
        if grads.tensors().len() != n || self.m.tensors().len() != n {
            return Err(shape("gradient and optimizer state do not match the parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr_t = lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let g_all = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for (((p, &g), m), v) in p
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(
    params: &ModelParams,
    grads: &GradientSet,
    state: &AdamState,
    lr: f64,
) -> Result<(ModelParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.update(&mut p, grads, lr)?;
    Ok((p, s))
}

/// Scales `g` down to global norm `clip` when it exceeds it.
pub fn clip_to_norm(g: &GradientSet, clip: f64) -> Result<GradientSet> {
    let mut out = g.clone();
    clip_in_place(&mut out, clip)?;
    Ok(out)
}

fn clip_in_place(g: &mut GradientSet, clip: f64) -> Result<()> {
    if !(clip > 0.0) {
        return Err(invalid(format!("clip norm must be positive, got {clip}")));
    }
    let norm = g.global_norm();
    if norm > clip {
        g.scale(clip / norm);
    }
    Ok(())
}

/// `(Σ clip(g_i, C) + N(0, (σ_m C)²)) / m` with noise drawn once per entry.
pub fn dp_aggregate(
    per_microbatch: &[GradientSet],
    clip: f64,
    noise_multiplier: f64,
    rng: &mut RngStream,
) -> Result<GradientSet> {
    let first = per_microbatch
        .first()
        .ok_or_else(|| invalid("no microbatch gradients to aggregate"))?;
    let mut sum = first.zeros_like();
    for g in per_microbatch {
        let mut c = g.clone();
        clip_in_place(&mut c, clip)?;
        sum.add_scaled(&c, 1.0)
            .map_err(|e| invalid(format!("microbatch gradient shapes differ: {e}")))?;
    }
    finish_aggregate(&mut sum, per_microbatch.len(), clip, noise_multiplier, rng)?;
    Ok(sum)
}

fn finish_aggregate(
    sum: &mut GradientSet,
    m: usize,
    clip: f64,
    noise_multiplier: f64,
    rng: &mut RngStream,
) -> Result<()> {
    if !(noise_multiplier >= 0.0 && noise_multiplier.is_finite()) {
        return Err(invalid(format!("noise multiplier must be nonnegative, got {noise_multiplier}")));
    }
    let std = noise_multiplier * clip;
    if std > 0.0 {
        for t in sum.tensors_mut() {
            for v in t.values_mut() {
                *v += std * rng.standard_normal();
            }
        }
    }
    sum.scale(1.0 / m as f64);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonPrivateConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSgdConfig {
    pub l2_norm_clip: f64,
    pub noise_multiplier: f64,
    pub num_microbatches: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainConfig {
    NonPrivate(NonPrivateConfig),
    DpSgd(DpSgdConfig),
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        match self {
            TrainConfig::NonPrivate(c) => c.epochs,
            TrainConfig::DpSgd(c) => c.epochs,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            TrainConfig::NonPrivate(c) => c.batch_size,
            TrainConfig::DpSgd(c) => c.batch_size,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            TrainConfig::NonPrivate(c) => c.learning_rate,
            TrainConfig::DpSgd(c) => c.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if self.batch_size() == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if let TrainConfig::DpSgd(c) = self {
            if !(c.l2_norm_clip > 0.0) {
                return Err(invalid(format!("clip norm must be positive, got {}", c.l2_norm_clip)));
            }
            if !(c.noise_multiplier >= 0.0 && c.noise_multiplier.is_finite()) {
                return Err(invalid(format!(
                    "noise multiplier must be nonnegative, got {}",
                    c.noise_multiplier
                )));
            }
            if c.num_microbatches == 0 || c.batch_size % c.num_microbatches != 0 {
                return Err(invalid(format!(
                    "{} microbatches do not divide batch size {}",
                    c.num_microbatches, c.batch_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken up to the end of this epoch.
    pub step_count: u64,
    /// Mean per-example MAE seen during the epoch, in scaled units.
    pub train_mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub n_samples: usize,
    pub batch_size: usize,
}

impl TrainLog {
    /// Batch sampling ratio seen by the accountant.
    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.n_samples as f64
    }

    /// Columns `epoch,step_count,train_mae`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "step_count", "train_mae"])?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), r.step_count.to_string(), r.train_mae.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Minibatch training on MAE.
///
/// Each epoch draws a uniform permutation from `rng.child(1)` and takes
/// `⌊n / batch⌋` steps, dropping the remainder. Under DP-SGD every batch is
/// split into contiguous microbatches whose mean gradients are clipped,
/// summed, perturbed with noise from `rng.child(2)` and divided by their
/// count before the Adam step.
pub fn train(
    spec: &ModelSpec,
    params0: &ModelParams,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    params0.check(spec)?;
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if data.input_dim() != spec.input || data.num_regions() != spec.output {
        return Err(shape(format!(
            "dataset has {} features and {} targets, model expects {} and {}",
            data.input_dim(),
            data.num_regions(),
            spec.input,
            spec.output
        )));
    }
    let batch = cfg.batch_size();
    let n = data.len();
    if batch > n {
        return Err(invalid(format!("batch size {batch} exceeds {n} training samples")));
    }
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs()),
        steps: 0,
        n_samples: n,
        batch_size: batch,
    };
    let mut params = params0.clone();
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = rng.child(1);
    let mut noise_rng = rng.child(2);
    let mut order: Vec<usize> = (0..n).collect();
    let lr = cfg.learning_rate();
    let batches = n / batch;

    for epoch in 1..=cfg.epochs() {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for b in 0..batches {
            let idx = &order[b * batch..(b + 1) * batch];
            let grads = match cfg {
                TrainConfig::NonPrivate(_) => {
                    let mut g = params.zeros_like();
                    for &i in idx {
                        loss_sum += example_grad(spec, &params, data, i, 1.0 / batch as f64, &mut g)?;
                    }
                    g
                }
                TrainConfig::DpSgd(c) => {
                    let mb = batch / c.num_microbatches;
                    let mut sum = params.zeros_like();
                    let mut g = params.zeros_like();
                    for chunk in idx.chunks(mb) {
                        g.scale(0.0);
                        for &i in chunk {
                            loss_sum += example_grad(spec, &params, data, i, 1.0 / mb as f64, &mut g)?;
                        }
                        clip_in_place(&mut g, c.l2_norm_clip)?;
                        sum.add_scaled(&g, 1.0)?;
                    }
                    finish_aggregate(
                        &mut sum,
                        c.num_microbatches,
                        c.l2_norm_clip,
                        c.noise_multiplier,
                        &mut noise_rng,
                    )?;
                    sum
                }
            };
            adam.update(&mut params, &grads, lr)?;
            log.steps += 1;
        }
        let train_mae = loss_sum / (batches * batch) as f64;
        if !train_mae.is_finite() || !params.all_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("epoch {epoch}: train MAE {train_mae:.6}");
        log.epochs.push(EpochRecord {
            epoch,
            step_count: log.steps,
            train_mae,
        });
    }
    Ok((params, log))
}

fn example_grad(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &WindowedDataset,
    i: usize,
    weight: f64,
    grads: &mut GradientSet,
) -> Result<f64> {
    // The tape never leaves this function, so no fingerprint is needed.
    let tape = forward_with_fingerprint(spec, params, data.input(i), 0)?;
    accumulate_gradients(spec, params, &tape, data.target(i), weight, grads)
}
