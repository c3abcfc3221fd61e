//! Noise-prediction training: `min E ||eps - eps_theta(X_t, I, t)||^2` with
//! uniform `t`, Adam with linear warmup.
//!
//! Every draw of step `s` comes from its own stream keyed by `(seed, s)`, so
//! a run resumed from a checkpoint at step `s` continues exactly as the
//! uninterrupted run would.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoders::{EncoderPair, FeaturePyramid};
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rangeview::{CameraView, RangeImage};
use crate::rng::{mix, stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::normalize::encode_range;
use super::schedule::DiffusionSchedule;
use super::unet::{CondBatch, Denoiser, RigCamera, RigPlans};

/// Window for the reported running loss.
pub const LOSS_WINDOW: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub warmup: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 2,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup: 200,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.adam.lr
        } else {
            self.adam.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// One training pair: normalized range tensor plus per-view pyramids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Tensor<f32>,
    pub cond: Vec<(FeaturePyramid<f32>, FeaturePyramid<f32>)>,
}

/// Pre-encoded training data. All examples share one calibrated rig.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub examples: Vec<Example>,
    pub plans: RigPlans,
}

/// Cameras of a view list, in order.
pub fn rig_of(views: &[CameraView]) -> Vec<RigCamera> {
    views
        .iter()
        .map(|v| {
            let (height, width) = v.size();
            RigCamera {
                calib: v.calib,
                height,
                width,
            }
        })
        .collect()
}

impl TrainSet {
    /// Encodes range images and (when the model is conditional) every view
    /// through the frozen encoders.
    pub fn build(model: &Denoiser, encoders: &EncoderPair, items: &[(RangeImage, Vec<CameraView>)]) -> Result<Self> {
        let conditional = model.config.uses_gcma();
        let rig = items.first().map(|(_, v)| rig_of(v)).unwrap_or_default();
        let mut examples = Vec::with_capacity(items.len());
        for (i, (range, views)) in items.iter().enumerate() {
            if range.sensor != model.sensor {
                return Err(Error::Calibration(format!("item {i}: range sensor differs from the model's")));
            }
            let cond = if conditional {
                if rig_of(views) != rig {
                    return Err(Error::Calibration(format!("item {i}: camera rig differs from item 0")));
                }
                views.iter().map(|v| encoders.encode(v)).collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            examples.push(Example {
                x0: encode_range(range),
                cond,
            });
        }
        let plans = model.plans(&rig)?;
        Ok(Self { examples, plans })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn cond_batch<T: Scalar>(&self, indices: &[usize]) -> Result<CondBatch<T>> {
        let items: Vec<Vec<_>> = indices
            .iter()
            .map(|&i| self.examples[i].cond.iter().map(|(s, d)| (s, d)).collect())
            .collect();
        CondBatch::stack(&items)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub recent: VecDeque<f64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model: &Denoiser, config: &TrainConfig, init_seed: u64) -> Self {
        let params = model.init_params(init_seed);
        let adam = Adam::new(config.adam, &params);
        Self {
            step: 0,
            params,
            adam,
            recent: VecDeque::with_capacity(LOSS_WINDOW),
        }
    }

    /// Mean of the last [`LOSS_WINDOW`] step losses.
    pub fn running_loss(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Indices, timesteps and noise for step `step`.
pub struct StepDraw<T: Scalar> {
    pub indices: Vec<usize>,
    pub t: Vec<usize>,
    pub noise: Tensor<T>,
}

pub fn draw_step<T: Scalar>(
    config: &TrainConfig,
    schedule: &DiffusionSchedule,
    n_examples: usize,
    shape: &[usize],
    step: u64,
) -> StepDraw<T> {
    let mut rng = stream_rng(mix(config.seed, step), streams::TRAIN);
    let indices: Vec<usize> = (0..config.batch).map(|_| rng.gen_range(0..n_examples)).collect();
    let t: Vec<usize> = (0..config.batch).map(|_| rng.gen_range(1..=schedule.t_max)).collect();
    let mut full = vec![config.batch];
    full.extend_from_slice(shape);
    let numel: usize = full.iter().product();
    let data = (0..numel).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    StepDraw {
        indices,
        t,
        noise: Tensor::from_vec(&full, data).expect("sized from shape"),
    }
}

/// Runs one optimizer step and advances `state`.
pub fn train_step<T: Scalar>(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    data: &TrainSet,
    config: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if config.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let step = state.step;
    let shape = data.examples[0].x0.shape().to_vec();
    let draw = draw_step::<T>(config, schedule, data.len(), &shape, step);
    let per = draw.noise.numel() / config.batch;
    let mut xt = Vec::with_capacity(draw.noise.numel());
    for (b, (&i, &t)) in draw.indices.iter().zip(&draw.t).enumerate() {
        let x0: Tensor<T> = data.examples[i].x0.cast();
        let eps = Tensor::from_vec(&shape, draw.noise.data()[b * per..(b + 1) * per].to_vec())?;
        xt.extend_from_slice(schedule.forward_noise(&x0, t, &eps)?.data());
    }
    let xt = Tensor::from_vec(draw.noise.shape(), xt)?;
    let cond = if model.config.uses_gcma() {
        Some(data.cond_batch::<T>(&draw.indices)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let x = g.constant(xt);
    let pred = model.forward(&mut g, &state.params, x, &draw.t, cond.as_ref().map(|c| (c, &data.plans)))?;
    let loss_var = g.mse_loss(pred, &draw.noise);
    let loss = g.value(loss_var).data()[0].to_f64_lossy();
    let grads = g.backward(loss_var).params(&g);
    if !loss.is_finite() || grads.values().any(|t| !t.all_finite()) {
        return Err(diverged(step, loss, &draw, state));
    }
    let lr = config.lr_at(step);
    state.adam.config.lr = lr;
    let grad_norm = state.adam.update(&mut state.params, &grads);
    state.step += 1;
    if state.recent.len() == LOSS_WINDOW {
        state.recent.pop_front();
    }
    state.recent.push_back(loss);
    Ok(StepLog {
        step: state.step,
        loss,
        lr,
        grad_norm,
    })
}

fn diverged<T: Scalar>(step: u64, loss: f64, draw: &StepDraw<T>, state: &TrainState<T>) -> Error {
    let mut worst: Vec<(String, f64)> = state
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.max_abs().to_f64_lossy()))
        .collect();
    worst.sort_by(|a, b| b.1.total_cmp(&a.1));
    worst.truncate(5);
    Error::Diverged {
        step,
        detail: format!(
            "loss={loss}, examples={:?}, t={:?}, running_loss={:?}, largest |param|: {worst:?}",
            draw.indices,
            draw.t,
            state.running_loss()
        ),
    }
}
