//! The outer training loop.
//!
//! Per iteration: while the iteration counter is below the convergence
//! iteration `r`, re-run significant-neighbor sampling against the current
//! embedding; recompute the slim adjacency; run the encoder-decoder; take
//! the masked MAE loss; backpropagate; clip; Adam-update every parameter
//! including the embedding. Once `iter >= r` the index set is frozen.

use rand::seq::SliceRandom;

use crate::data::{ForecastBatch, Scaler};
use crate::diffusion::ConvMode;
use crate::error::{CoreError, Result};
use crate::model::{masked_mae_all, Forecaster, ModelConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::tape::Tape;

pub const GRAD_CLIP_NORM: f64 = 5.0;
/// Epochs without validation improvement before the learning rate halves.
const LR_PLATEAU_EPOCHS: usize = 5;
/// Epochs without validation improvement before training stops.
const EARLY_STOP_PATIENCE: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Cumulative iteration count at the end of the epoch.
    pub iter: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

pub struct TrainOutcome {
    pub model: Forecaster,
    pub optimizer: Adam,
    pub iterations: usize,
    pub logs: Vec<EpochLog>,
    pub best_val_mae: f64,
}

/// Model-variant switches that are not part of the learning configuration:
/// the no-graph ablation and the dense reference route.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub graph_enabled: bool,
    pub conv_mode: ConvMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            graph_enabled: true,
            conv_mode: ConvMode::Slim,
        }
    }
}

/// Trains a fresh model. Deterministic for a fixed config seed. The
/// returned model carries the best-validation parameters.
pub fn train(
    config: &ModelConfig,
    train_batches: &[ForecastBatch],
    val_batches: &[ForecastBatch],
    scaler: &Scaler,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    train_with(
        config,
        train_batches,
        val_batches,
        scaler,
        TrainOptions::default(),
        on_epoch,
    )
}

pub fn train_with(
    config: &ModelConfig,
    train_batches: &[ForecastBatch],
    val_batches: &[ForecastBatch],
    scaler: &Scaler,
    options: TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_batches.is_empty() || val_batches.is_empty() {
        return Err(CoreError::InvalidConfig(
            "training requires non-empty train and validation batches".into(),
        ));
    }

    let mut model = Forecaster::new(config)?;
    model.set_graph_enabled(options.graph_enabled);
    model.set_conv_mode(options.conv_mode);
    let mut optimizer = Adam::new(model.store(), config.learning_rate);

    let planned_iters = config.max_epochs * train_batches.len();
    let convergence_iter = config
        .convergence_iter
        .unwrap_or(planned_iters * 8 / 10);

    let mut iter = 0usize;
    let mut logs = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<(Vec<crate::tensor::Tensor>, Vec<usize>)> = None;
    let mut epochs_since_best = 0usize;
    let mut plateau = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_batches.len()).collect();
        order.shuffle(&mut crate::rng::stream(
            config.seed,
            crate::rng::StreamKind::Shuffle,
            epoch as u64,
        ));

        let mut epoch_loss = 0.0;
        for &batch_idx in &order {
            if iter < convergence_iter {
                model.refresh_neighbors(crate::rng::derive_seed(config.seed, iter as u64 + 1))?;
            }
            let mut tape = Tape::new();
            // Parameters blown out to non-finite values surface as
            // NonFinite from the forward pass; report them as divergence.
            let output = match model.forward_batch(&mut tape, &train_batches[batch_idx], scaler) {
                Ok(output) => output,
                Err(CoreError::NonFinite { .. }) => return Err(CoreError::Diverged { iter }),
                Err(other) => return Err(other),
            };
            let loss = tape.value(output.loss)?.item()?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { iter });
            }
            epoch_loss += loss;
            tape.backward(output.loss, model.store_mut())?;
            clip_global_norm(model.store_mut(), GRAD_CLIP_NORM);
            optimizer.step(model.store_mut());
            iter += 1;
        }

        let val_mae = masked_mae_all(&model, val_batches, scaler)?;
        if !val_mae.is_finite() {
            return Err(CoreError::Diverged { iter });
        }
        let log = EpochLog {
            epoch,
            iter,
            train_loss: epoch_loss / train_batches.len() as f64,
            val_mae,
        };
        on_epoch(&log);
        logs.push(log);

        if val_mae < best_val - 1e-12 {
            best_val = val_mae;
            best_snapshot = Some((model.store().snapshot_values(), model.index_set().to_vec()));
            epochs_since_best = 0;
            plateau = 0;
        } else {
            epochs_since_best += 1;
            plateau += 1;
            if plateau >= LR_PLATEAU_EPOCHS {
                optimizer.set_lr(optimizer.lr() * 0.5);
                plateau = 0;
            }
            if epochs_since_best >= EARLY_STOP_PATIENCE {
                break;
            }
        }
    }

    if let Some((values, index_set)) = best_snapshot {
        model.store_mut().restore_values(&values);
        model.set_index_set(index_set)?;
    }

    Ok(TrainOutcome {
        model,
        optimizer,
        iterations: iter,
        logs,
        best_val_mae: best_val,
    })
}
