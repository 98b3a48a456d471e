use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricLog, MetricRow};
use crate::model::checkpoint::{self, Checkpoint, TrainingState};
use crate::model::config::ThriftyConfig;
use crate::model::forward::{backward, forward, predict};
use crate::model::params::{ParamId, Params};
use crate::ops::batchnorm::Mode;
use crate::ops::loss::{argmax_rows, softmax_cross_entropy};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::train::config::TrainConfig;
use crate::train::optim::{alpha_reg_loss, AlphaRegState, Sgd};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Side channels of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `metrics.csv`, `last.ckpt` and `best.ckpt` after every
    /// epoch.
    pub out_dir: Option<PathBuf>,
    /// Return after this many epochs of the current call.
    pub stop_after: Option<usize>,
    /// Keep α fixed throughout.
    pub freeze_alpha: bool,
    pub on_epoch: Option<Box<dyn FnMut(&MetricRow) + 'a>>,
}

pub struct TrainOutcome<S> {
    pub params: Params<S>,
    /// Rows produced by this call only.
    pub log: MetricLog,
    pub state: TrainingState<S>,
}

impl<S> TrainOutcome<S> {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.log.last().map(|r| r.test_acc)
    }
}

/// Eval-mode top-1 accuracy in percent.
pub fn evaluate<S: Scalar>(
    config: &ThriftyConfig,
    params: &Params<S>,
    dataset: &ImageDataset,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in dataset.eval_batches(batch_size) {
        let logits = predict(config, params, &batch.images.cast::<S>(), Mode::Eval)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Runs (or resumes) the epoch loop. `params` must already hold the
/// resumed weights when `resume` is given.
pub fn train<S: Scalar>(
    config: &ThriftyConfig,
    mut params: Params<S>,
    train_set: &ImageDataset,
    test_set: &ImageDataset,
    tc: &TrainConfig,
    resume: Option<TrainingState<S>>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome<S>> {
    tc.validate()?;
    config.validate()?;
    params.check(config)?;
    for ds in [train_set, test_set] {
        if ds.class_count != config.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                ds.class_count, config.num_classes
            )));
        }
    }
    if tc.alpha_reg.is_some() && !config.is_residual() {
        return Err(Error::Config("alpha_reg needs a residual model (history ≥ 1)".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }

    let mut sgd = Sgd::new(&params, tc.momentum, tc.weight_decay);
    sgd.alpha_frozen = opts.freeze_alpha;
    let mut state = TrainingState {
        velocity: Vec::new(),
        epochs_done: 0,
        steps: 0,
        lambda: tc.alpha_reg.as_ref().map_or(0.0, |r| r.lambda0),
        best_test_acc: f64::NEG_INFINITY,
        alpha_frozen: opts.freeze_alpha,
    };
    if let Some(r) = resume {
        if r.velocity.len() != sgd.velocity.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        sgd.velocity = r.velocity.clone();
        sgd.alpha_frozen = r.alpha_frozen || opts.freeze_alpha;
        state = TrainingState {
            alpha_frozen: sgd.alpha_frozen,
            ..r
        };
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut log = MetricLog::new();
    let start = state.epochs_done as usize;
    let end = match opts.stop_after {
        Some(n) => (start + n).min(tc.epochs),
        None => tc.epochs,
    };
    let mut reg = tc.alpha_reg.as_ref().map(|r| AlphaRegState {
        lambda: state.lambda,
        eps: r.eps,
    });

    for epoch in start..end {
        let t0 = Instant::now();
        let lr = tc.lr(epoch);
        let reg_active = tc
            .alpha_reg
            .as_ref()
            .is_some_and(|r| epoch < r.epochs && !sgd.alpha_frozen);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train_set.batches(tc.batch_size, tc.seed, epoch as u64, true) {
            let x = batch.images.cast::<S>();
            let mut tape = Tape::new();
            let fwd = forward(config, &params, &x, Mode::Train, &mut tape, false)?;
            let logits = tape.value(fwd.logits);
            let (loss, seed) = softmax_cross_entropy(logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, step {}",
                    state.steps
                )));
            }
            correct += argmax_rows(logits)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            loss_sum += loss * batch.labels.len() as f64;
            let mut grads = backward(&params, &tape, &fwd, seed)?;
            drop(tape);
            if let (true, Some(r), Some(alpha)) = (reg_active, reg.as_mut(), params.alpha.as_ref()) {
                let (_, g) = alpha_reg_loss(alpha, r.lambda);
                let ga = grads.get_mut(ParamId::Alpha).expect("residual model has alpha");
                for (a, b) in ga.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            sgd.step(&mut params, &grads, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                e => e,
            })?;
            params.update_running_stats(&fwd);
            state.steps += 1;
            if reg_active {
                if let Some(r) = reg.as_mut() {
                    r.step();
                }
            }
        }

        let test_acc = evaluate(config, &params, test_set, tc.batch_size)?;
        let n = train_set.len() as f64;
        let row = MetricRow {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: 100.0 * correct as f64 / n,
            test_acc,
            lambda: reg.map_or(0.0, |r| r.lambda),
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        let improved = test_acc > state.best_test_acc;
        state.epochs_done = epoch as u64 + 1;
        state.lambda = row.lambda;
        if improved {
            state.best_test_acc = test_acc;
        }
        state.velocity = sgd.velocity.clone();
        log.push(row.clone())?;
        if let Some(dir) = &opts.out_dir {
            let ckpt = Checkpoint {
                config: config.clone(),
                params: params.clone(),
                training: Some(state.clone()),
            };
            if improved {
                checkpoint::save(dir.join(BEST_CHECKPOINT), &ckpt)?;
            }
            checkpoint::save(dir.join(LAST_CHECKPOINT), &ckpt)?;
            append_metrics(dir, &row, epoch == 0)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
    }
    state.velocity = sgd.velocity;
    Ok(TrainOutcome { params, log, state })
}

/// Keeps `metrics.csv` in sync with the rows produced so far, including
/// rows written by an earlier run that is being resumed.
fn append_metrics(dir: &std::path::Path, row: &MetricRow, fresh: bool) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let mut log = if fresh || !path.exists() {
        MetricLog::new()
    } else {
        MetricLog::read_csv(&path)?
    };
    // a resumed run may replay epochs that an interrupted run had logged
    let kept: Vec<MetricRow> = log.rows().iter().filter(|r| r.epoch < row.epoch).cloned().collect();
    log = MetricLog::new();
    for r in kept {
        log.push(r)?;
    }
    log.push(row.clone())?;
    log.write_csv(path)
}
