//! Training loop shared by the variational and direct models: online cloud
//! masking, masked MSE on target-visible pixels, Adam with a per-epoch decay.

use log::{info, warn};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference, relative_error, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::GappyField;
use crate::obs_sim::{gen_cloud_mask, mix_seed, rng_for, CloudMaskConfig};

/// One training window in normalized space, flattened `T × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dims: (usize, usize, usize),
    /// Observed values, zero where hidden.
    pub obs: Vec<f64>,
    pub obs_mask: Vec<f64>,
    /// Target values, zero where the target itself is missing.
    pub target: Vec<f64>,
    pub target_mask: Vec<f64>,
    /// `H × W`, 1 on sea.
    pub ocean: Vec<f64>,
}

impl Sample {
    /// Hides `cloud`-covered pixels of `target`; `cloud(t)` gives frame `t`'s mask.
    pub fn from_target(
        target: &GappyField,
        ocean: &Array2<bool>,
        mut cloud: impl FnMut(usize) -> Array2<bool>,
    ) -> Self {
        let (t, h, w) = target.dims();
        let n = t * h * w;
        let mut s = Sample {
            dims: (t, h, w),
            obs: vec![0.0; n],
            obs_mask: vec![0.0; n],
            target: vec![0.0; n],
            target_mask: vec![0.0; n],
            ocean: ocean.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
        };
        for k in 0..t {
            let clouds = cloud(k);
            for i in 0..h {
                for j in 0..w {
                    let idx = (k * h + i) * w + j;
                    if !(ocean[[i, j]] && target.valid()[[k, i, j]]) {
                        continue;
                    }
                    let v = target.values()[[k, i, j]];
                    s.target[idx] = v;
                    s.target_mask[idx] = 1.0;
                    if !clouds[[i, j]] {
                        s.obs[idx] = v;
                        s.obs_mask[idx] = 1.0;
                    }
                }
            }
        }
        s
    }

    pub fn visible_count(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// A model whose reconstruction of a [`Sample`] is differentiable in its parameters.
pub trait Trainable: Clone + Send + Sync {
    fn params(&self) -> Vec<Tensor>;
    fn set_params(&mut self, params: &[Tensor]);
    /// `[1, T, H, W]` reconstruction built from parameter leaves in [`Trainable::params`] order.
    fn predict<'g>(&self, g: &'g Graph, params: &[Var<'g>], s: &Sample) -> Result<Var<'g>>;
}

/// Mean squared error over target-visible pixels.
pub fn masked_mse<'g>(pred: Var<'g>, target: Var<'g>, s: &Sample) -> Result<Var<'g>> {
    let n = s.visible_count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mask = std::rc::Rc::new(s.target_mask.clone());
    Ok((pred - target)
        .mul_const(&mask)
        .sum_sq()
        .scale_const(1.0 / n as f64))
}

fn loss_var<'g, M: Trainable>(
    model: &M,
    g: &'g Graph,
    params: &[Var<'g>],
    s: &Sample,
) -> Result<Var<'g>> {
    let pred = model.predict(g, params, s)?;
    let target = g.leaf(Tensor::new(pred.shape(), s.target.clone()));
    masked_mse(pred, target, s)
}

pub fn sample_loss<M: Trainable>(model: &M, s: &Sample) -> Result<f64> {
    let g = Graph::new();
    let params: Vec<Var> = model.params().into_iter().map(|t| g.leaf(t)).collect();
    Ok(loss_var(model, &g, &params, s)?.item())
}

pub fn sample_loss_grad<M: Trainable>(model: &M, s: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let params: Vec<Var> = model.params().into_iter().map(|t| g.leaf(t)).collect();
    let loss = loss_var(model, &g, &params, s)?;
    let grads = g
        .grad(loss, &params)
        .into_iter()
        .map(|v| v.value().as_ref().clone())
        .collect();
    Ok((loss.item(), grads))
}

/// Relative error between the analytic training gradient and central
/// differences over the first `max_coords` parameter coordinates (all when `None`).
pub fn gradient_check<M: Trainable>(
    model: &M,
    s: &Sample,
    h: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let (_, grads) = sample_loss_grad(model, s)?;
    let params = model.params();
    let flat: Vec<f64> = params.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = max_coords.map_or(flat.len(), |m| m.min(flat.len()));
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).take(n).collect();
    let mut probe = model.clone();
    let mut failure = None;
    let numeric = finite_difference(&flat[..n], h, |head| {
        let mut full = flat.clone();
        full[..n].copy_from_slice(head);
        probe.set_params(&unflatten(&params, &full));
        sample_loss(&probe, s).unwrap_or_else(|e| {
            failure = Some(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

fn unflatten(like: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let d = flat[off..off + t.len()].to_vec();
            off += t.len();
            Tensor::new(t.shape().to_vec(), d)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Frames per window.
    pub window: usize,
    /// Random spatial crop `(rows, cols)` of training windows; full frames when absent.
    pub crop: Option<(usize, usize)>,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Global gradient norm cap.
    pub grad_clip: Option<f64>,
    /// Fixed validation windows drawn from the validation split.
    pub valid_windows: usize,
    pub grad_check: bool,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 10,
            batch_size: 4,
            window: 5,
            crop: None,
            learning_rate: 5e-3,
            lr_decay: 0.9,
            grad_clip: Some(1.0),
            valid_windows: 8,
            grad_check: false,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.window == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("window, batch_size and steps_per_epoch must be positive");
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    /// Validation loss of the untrained model.
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

const VALID_STREAM: u64 = 0x5641_4c49_44;

fn window_sample(
    field: &GappyField,
    ocean: &Array2<bool>,
    clouds: &CloudMaskConfig,
    (t0, row0, col0): (usize, usize, usize),
    (t, h, w): (usize, usize, usize),
    seed: u64,
) -> Result<Sample> {
    let target = field.frames(t0, t0 + t)?.crop(row0, col0, h, w)?;
    let ocean = ocean
        .slice(ndarray::s![row0..row0 + h, col0..col0 + w])
        .to_owned();
    let land = ocean.mapv(|o| !o);
    Ok(Sample::from_target(&target, &ocean, |k| {
        gen_cloud_mask((h, w), clouds, mix_seed(seed, k as u64), Some(&land))
    }))
}

/// Fixed validation windows: non-overlapping, full frames, seeded masks.
pub fn validation_samples(
    valid: &GappyField,
    ocean: &Array2<bool>,
    clouds: &CloudMaskConfig,
    cfg: &TrainConfig,
) -> Result<Vec<Sample>> {
    let (t, h, w) = valid.dims();
    let count = (t / cfg.window).min(cfg.valid_windows);
    if count == 0 {
        return Err(Error::EmptySelection);
    }
    (0..count)
        .map(|i| {
            window_sample(
                valid,
                ocean,
                clouds,
                (i * cfg.window, 0, 0),
                (cfg.window, h, w),
                mix_seed(mix_seed(cfg.seed, VALID_STREAM), i as u64),
            )
        })
        .collect()
}

fn mean_loss<M: Trainable>(model: &M, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(model, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-item `(loss, grads)` in batch order, optionally spread over threads.
fn batch_grads<M: Trainable>(
    model: &M,
    batch: &[Sample],
    workers: usize,
) -> Result<Vec<(f64, Vec<Tensor>)>> {
    if workers <= 1 || batch.len() <= 1 {
        return batch.iter().map(|s| sample_loss_grad(model, s)).collect();
    }
    let chunk = batch.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| sample_loss_grad(model, s))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}

/// Trains `model` on windows of `train` with online cloud masks.
///
/// Both fields are normalized; `ocean` is the sea mask shared by both.
pub fn fit<M: Trainable>(
    mut model: M,
    train: &GappyField,
    valid: &GappyField,
    ocean: &Array2<bool>,
    clouds: &CloudMaskConfig,
    cfg: &TrainConfig,
) -> Result<(M, History)> {
    cfg.validate()?;
    clouds.validate()?;
    let (t, h, w) = train.dims();
    if cfg.window > t {
        return Err(Error::InvalidSpec(format!(
            "window of {} frames exceeds the {t} training frames",
            cfg.window
        )));
    }
    if ocean.dim() != (h, w) || valid.dims().1 != h || valid.dims().2 != w {
        return Err(Error::ShapeMismatch("train, valid and ocean extents differ".into()));
    }
    let (ch, cw) = cfg.crop.unwrap_or((h, w));
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::InvalidSpec(format!("crop {ch}x{cw} does not fit {h}x{w}")));
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let valid_set = validation_samples(valid, ocean, clouds, cfg)?;
    history.initial_valid_loss = mean_loss(&model, &valid_set)?;
    info!("initial validation loss {:.6}", history.initial_valid_loss);

    let mut params = model.params();
    let mut adam = Adam::new(&params);
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        let mut train_loss = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let step_seed = mix_seed(mix_seed(cfg.seed, epoch as u64), step as u64);
            let mut rng = rng_for(step_seed, 0);
            let batch = (0..cfg.batch_size)
                .map(|item| {
                    let origin = (
                        rng.random_range(0..=t - cfg.window),
                        rng.random_range(0..=h - ch),
                        rng.random_range(0..=w - cw),
                    );
                    window_sample(
                        train,
                        ocean,
                        clouds,
                        origin,
                        (cfg.window, ch, cw),
                        mix_seed(step_seed, item as u64 + 1),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            if cfg.grad_check && epoch == 0 && step == 0 {
                let err = gradient_check(&model, &batch[0], 1e-5, Some(24))?;
                if err > 1e-5 {
                    warn!("gradient check: relative error {err:.3e}");
                } else {
                    info!("gradient check: relative error {err:.3e}");
                }
            }
            let results = batch_grads(&model, &batch, cfg.workers)?;
            let inv = 1.0 / results.len() as f64;
            let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l * inv;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b * inv;
                    }
                }
            }
            let global_step = epoch * cfg.steps_per_epoch + step + 1;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    iteration: global_step,
                });
            }
            if let Some(cap) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > cap {
                    let s = cap / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
                }
            }
            adam.step(&mut params, &grads, lr);
            model.set_params(&params);
            train_loss += loss / cfg.steps_per_epoch as f64;
        }
        let valid_loss = mean_loss(&model, &valid_set)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                iteration: (epoch + 1) * cfg.steps_per_epoch,
            });
        }
        info!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        lr *= cfg.lr_decay;
    }
    Ok((model, history))
}
