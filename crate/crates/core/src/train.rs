//! Supervised training loops: general-domain pre-training, fixed-budget
//! fine-tuning, and the mini-batch plumbing they share.
//!
//! Everything here is deterministic given `(seed, options, data)`: epoch
//! shuffles come from [`rng_for`], batches are formed in shuffled-index order,
//! and validation batches are never shuffled.

use crate::error::{Error, Result};
use crate::model::{
    backward, forward_loss, Batch, LrSchedule, ModelConfig, ModelKind, OptKind, OptimizerState,
};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use rand::seq::SliceRandom;

/// Training set in id space; unifies batching across the two model kinds.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Lm(&'a [Vec<u32>]),
    Translation(&'a [(Vec<u32>, Vec<u32>)]),
}

impl<'a> TrainData<'a> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Lm(s) => s.len(),
            TrainData::Translation(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            TrainData::Lm(_) => ModelKind::Lm,
            TrainData::Translation(_) => ModelKind::Translator,
        }
    }

    /// Assembles the batch holding `indices`, in the given order.
    pub fn batch(&self, indices: &[usize], max_len: usize) -> Result<Batch> {
        match self {
            TrainData::Lm(s) => {
                let rows: Vec<Vec<u32>> = indices.iter().map(|&i| s[i].clone()).collect();
                Batch::for_lm(&rows, max_len)
            }
            TrainData::Translation(p) => {
                let rows: Vec<(Vec<u32>, Vec<u32>)> =
                    indices.iter().map(|&i| p[i].clone()).collect();
                Batch::for_translation(&rows, max_len)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Hard optimizer-step budget. Zero means no steps at all.
    pub max_steps: usize,
    pub max_epochs: usize,
    pub optimizer: OptKind,
    pub schedule: LrSchedule,
    /// Steps between validation checks; 0 checks once per epoch.
    pub eval_every: usize,
    /// Stop after this many consecutive non-improving checks; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 16,
            max_steps: usize::MAX,
            max_epochs: 10,
            optimizer: OptKind::Adam,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            eval_every: 0,
            patience: 3,
            seed: 0,
        }
    }
}

/// What a training run did, step counts and the loss trace that goes into the
/// checkpoint sidecar.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    /// Token-weighted mean training loss of the final epoch.
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
    /// Validation NLL per check when a validation set exists, otherwise the
    /// per-epoch mean training loss.
    pub loss_history: Vec<f64>,
    pub stopped_early: bool,
}

/// Token-weighted mean NLL over a held-out set, batched without shuffling.
pub fn mean_nll<F: Scalar>(
    params: &crate::model::ParamVector<F>,
    cfg: &ModelConfig,
    data: &TrainData,
    batch_size: usize,
) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, cfg.max_len)?;
        let out = forward_loss(params, cfg, &batch, data.kind(), None)?;
        loss_sum += out.loss.to64() * batch.n_tokens as f64;
        tokens += batch.n_tokens;
    }
    Ok(loss_sum / tokens.max(1) as f64)
}

/// The shared epoch/step loop. Shuffles per epoch, steps the optimizer with
/// the scheduled learning rate, optionally validates and early-stops.
pub fn train_supervised<F: Scalar>(
    params: &mut crate::model::ParamVector<F>,
    cfg: &ModelConfig,
    data: &TrainData,
    validation: Option<&TrainData>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus("training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    cfg.validate()?;

    let mut opt = OptimizerState::<F>::new(opts.optimizer, 0.0, params.len());
    let mut report = TrainReport {
        steps: 0,
        epochs: 0,
        final_train_loss: f64::NAN,
        best_val_loss: None,
        loss_history: Vec::new(),
        stopped_early: false,
    };
    let mut checks_since_best = 0usize;
    let mut done = opts.max_steps == 0;

    for epoch in 0..opts.max_epochs {
        if done {
            break;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(opts.seed, &[0x5e9, epoch as u64]));

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            if report.steps >= opts.max_steps {
                done = true;
                break;
            }
            let batch = data.batch(chunk, cfg.max_len)?;
            let dropout_seed = if cfg.dropout > 0.0 {
                Some(crate::seed::derive_seed(
                    opts.seed,
                    &[0xd0, report.steps as u64],
                ))
            } else {
                None
            };
            let out = backward(params, cfg, &batch, data.kind(), dropout_seed)?;
            let loss = out.loss.to64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("training step {}", report.steps + 1),
                });
            }
            opt.lr = opts.schedule.lr(report.steps + 1, cfg.d_model);
            opt.step(params)?;
            report.steps += 1;
            epoch_loss += loss * batch.n_tokens as f64;
            epoch_tokens += batch.n_tokens;

            if let Some(val) = validation {
                if opts.eval_every > 0 && report.steps % opts.eval_every == 0 {
                    let v = mean_nll(params, cfg, val, opts.batch_size)?;
                    report.loss_history.push(v);
                    if improve(&mut report.best_val_loss, v) {
                        checks_since_best = 0;
                    } else {
                        checks_since_best += 1;
                        if opts.patience > 0 && checks_since_best >= opts.patience {
                            report.stopped_early = true;
                            done = true;
                            break;
                        }
                    }
                }
            }
        }
        report.epochs = epoch + 1;
        if epoch_tokens > 0 {
            report.final_train_loss = epoch_loss / epoch_tokens as f64;
        }
        if report.steps >= opts.max_steps {
            done = true;
        }

        match validation {
            Some(val) if opts.eval_every == 0 && !done => {
                let v = mean_nll(params, cfg, val, opts.batch_size)?;
                report.loss_history.push(v);
                if improve(&mut report.best_val_loss, v) {
                    checks_since_best = 0;
                } else {
                    checks_since_best += 1;
                    if opts.patience > 0 && checks_since_best >= opts.patience {
                        report.stopped_early = true;
                        done = true;
                    }
                }
            }
            None => {
                if epoch_tokens > 0 {
                    report.loss_history.push(report.final_train_loss);
                }
            }
            _ => {}
        }
    }
    Ok(report)
}

fn improve(best: &mut Option<f64>, v: f64) -> bool {
    match best {
        Some(b) if v >= *b => false,
        _ => {
            *best = Some(v);
            true
        }
    }
}

/// General-domain pre-training: Adam with the inverse-square-root warm-up
/// schedule. `warmup` defaults to 200 at desk scale.
pub fn vanilla_train<F: Scalar>(
    params: &mut crate::model::ParamVector<F>,
    cfg: &ModelConfig,
    data: &TrainData,
    validation: Option<&TrainData>,
    warmup: usize,
    lr_factor: f64,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let mut o = opts.clone();
    o.optimizer = OptKind::Adam;
    o.schedule = LrSchedule::InverseSqrt {
        warmup,
        factor: lr_factor,
    };
    train_supervised(params, cfg, data, validation, &o)
}

/// Fixed-budget adaptation: exactly `epochs` passes with constant-rate Adam,
/// no validation and no early stopping, so every run of the protocol costs the
/// same number of updates.
pub fn fine_tune<F: Scalar>(
    params: &mut crate::model::ParamVector<F>,
    cfg: &ModelConfig,
    data: &TrainData,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainReport> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    let opts = TrainOptions {
        batch_size,
        max_steps: usize::MAX,
        max_epochs: epochs,
        optimizer: OptKind::Adam,
        schedule: LrSchedule::Constant { lr },
        eval_every: 0,
        patience: 0,
        seed,
    };
    train_supervised(params, cfg, data, None, &opts)
}
