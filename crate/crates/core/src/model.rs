//! The forecaster: learned graph structure feeding a graph-convolutional
//! GRU encoder-decoder.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{time_slice, ForecastBatch, Scaler};
use crate::diffusion::{one_step_fast_gconv, register_gru, ConvMode, GruSlots};
use crate::error::{CoreError, Result};
use crate::graph::{
    compute_slim_adjacency, init_candidates, register_attention, zero_adjacency, AttentionSlots,
    CandidateMatrix, SlimAdjacency,
};
use crate::metrics::{Metrics, MetricsAccumulator};
use crate::param::{uniform_init, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// N, number of series.
    pub num_nodes: usize,
    /// M, size of the shared significant-neighbor set.
    pub neighborhood: usize,
    /// K, frequency-ranked portion of the neighbor set; the remaining
    /// M - K slots are random exploration.
    pub top_k: usize,
    /// d, node embedding width.
    pub embed_dim: usize,
    /// Hidden width of the recurrent cell.
    pub hidden_dim: usize,
    /// P, number of attention heads.
    pub heads: usize,
    /// J, diffusion depth of each graph convolution.
    pub diffusion_steps: usize,
    /// h, history steps fed to the encoder.
    pub history: usize,
    /// f, forecast steps produced by the decoder.
    pub horizon: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Entmax sparsity parameter.
    pub alpha: f64,
    /// r: neighbor sampling refreshes while iteration < r. `None` derives
    /// 80% of the planned iteration count at training time.
    pub convergence_iter: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_nodes: 0,
            neighborhood: 100,
            top_k: 80,
            embed_dim: 100,
            hidden_dim: 64,
            heads: 8,
            diffusion_steps: 3,
            history: 12,
            horizon: 12,
            in_channels: 2,
            out_channels: 1,
            alpha: 2.0,
            convergence_iter: None,
            batch_size: 64,
            learning_rate: 0.003,
            max_epochs: 100,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_nodes == 0 {
            problems.push("num_nodes must be >= 1".to_string());
        }
        if !(self.top_k < self.neighborhood && self.neighborhood <= self.num_nodes) {
            problems.push(format!(
                "need K < M <= N, got K = {}, M = {}, N = {}",
                self.top_k, self.neighborhood, self.num_nodes
            ));
        }
        if self.diffusion_steps < 1 {
            problems.push("diffusion_steps must be >= 1".into());
        }
        if self.history < 2 {
            problems.push("history must be >= 2".into());
        }
        if self.horizon < 1 {
            problems.push("horizon must be >= 1".into());
        }
        crate::entmax::validate_alpha(self.alpha)
            .map_err(|e| problems.push(e.to_string()))
            .ok();
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.heads == 0 {
            problems.push("embed_dim, hidden_dim and heads must be >= 1".into());
        }
        if self.in_channels < self.out_channels || self.out_channels == 0 {
            problems.push(format!(
                "need in_channels >= out_channels >= 1, got {} and {}",
                self.in_channels, self.out_channels
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            problems.push("learning_rate must be positive and finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Full model state: parameters, candidate pools, and the current
/// significant-neighbor index set.
pub struct Forecaster {
    config: ModelConfig,
    store: ParamStore,
    embedding_slot: usize,
    attention: AttentionSlots,
    gru: GruSlots,
    /// `None` when M = N; there is no room to sample and the index set is
    /// pinned to the identity.
    candidates: Option<CandidateMatrix>,
    index_set: Vec<usize>,
    conv_mode: ConvMode,
    graph_enabled: bool,
}

impl Forecaster {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(config.seed, crate::rng::StreamKind::ParamInit, 0);
        let mut store = ParamStore::new();
        let embedding_slot = store.register(
            "embedding",
            uniform_init(&mut rng, &[config.num_nodes, config.embed_dim], config.embed_dim),
        );
        let attention = register_attention(&mut store, config.embed_dim, config.heads, &mut rng);
        let gru = register_gru(
            &mut store,
            config.in_channels,
            config.hidden_dim,
            config.out_channels,
            config.diffusion_steps,
            &mut rng,
        );

        let (candidates, index_set) = if config.neighborhood == config.num_nodes {
            (None, (0..config.num_nodes).collect())
        } else {
            let mut candidates =
                init_candidates(config.num_nodes, config.neighborhood, config.seed)?;
            let index_set = candidates.sample_significant(
                store.value(embedding_slot),
                config.top_k,
                crate::rng::derive_seed(config.seed, 0),
            )?;
            (Some(candidates), index_set)
        };

        Ok(Forecaster {
            config: config.clone(),
            store,
            embedding_slot,
            attention,
            gru,
            candidates,
            index_set,
            conv_mode: ConvMode::Slim,
            graph_enabled: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn index_set(&self) -> &[usize] {
        &self.index_set
    }

    pub fn embedding_slot(&self) -> usize {
        self.embedding_slot
    }

    pub fn attention_slots(&self) -> &AttentionSlots {
        &self.attention
    }

    pub fn gru_slots(&self) -> &GruSlots {
        &self.gru
    }

    pub fn conv_mode(&self) -> ConvMode {
        self.conv_mode
    }

    pub fn set_conv_mode(&mut self, mode: ConvMode) {
        self.conv_mode = mode;
    }

    /// Disables the learned graph entirely: the adjacency is forced to zero
    /// and diffusion degenerates to per-node channel mixing (the no-graph
    /// ablation).
    pub fn set_graph_enabled(&mut self, enabled: bool) {
        self.graph_enabled = enabled;
    }

    pub fn graph_enabled(&self) -> bool {
        self.graph_enabled
    }

    /// Overrides the significant-neighbor set, e.g. to pin the identity
    /// permutation when comparing against the dense route.
    pub fn set_index_set(&mut self, index_set: Vec<usize>) -> Result<()> {
        if index_set.len() != self.config.neighborhood {
            return Err(CoreError::InvalidConfig(format!(
                "index set must have M = {} ids, got {}",
                self.config.neighborhood,
                index_set.len()
            )));
        }
        let mut seen = vec![false; self.config.num_nodes];
        for &id in &index_set {
            if id >= self.config.num_nodes {
                return Err(CoreError::IndexOutOfRange {
                    op: "set_index_set",
                    index: id,
                    extent: self.config.num_nodes,
                });
            }
            if seen[id] {
                return Err(CoreError::InvalidConfig(format!("duplicate id {id}")));
            }
            seen[id] = true;
        }
        self.index_set = index_set;
        Ok(())
    }

    /// Re-runs significant-neighbor sampling against the current embedding.
    /// No-op when M = N.
    pub fn refresh_neighbors(&mut self, seed: u64) -> Result<()> {
        if let Some(candidates) = self.candidates.as_mut() {
            self.index_set = candidates.sample_significant(
                self.store.value(self.embedding_slot),
                self.config.top_k,
                seed,
            )?;
        }
        Ok(())
    }

    fn build_adjacency(&self, tape: &mut Tape) -> Result<SlimAdjacency> {
        if !self.graph_enabled {
            return Ok(zero_adjacency(tape, self.config.num_nodes, &self.index_set));
        }
        let embedding = tape.param(&self.store, self.embedding_slot);
        compute_slim_adjacency(
            tape,
            &self.store,
            &self.attention,
            embedding,
            &self.index_set,
            self.config.alpha,
        )
    }

    /// Zero-pads a prediction back to the input channel count so it can be
    /// fed into the next decoder step. Covariate channels of not-yet-seen
    /// steps are unknown to the decoder and stay zero.
    fn pad_feedback(&self, tape: &mut Tape, prediction: Var, batch: usize) -> Result<Var> {
        let pad = self.config.in_channels - self.config.out_channels;
        if pad == 0 {
            return Ok(prediction);
        }
        let zeros = tape.constant(Tensor::zeros(&[batch, self.config.num_nodes, pad]));
        tape.concat_last(prediction, zeros)
    }

    /// Runs encoder and decoder for one batch, returning the per-step
    /// predictions in original units (the scaler's inverse is applied on
    /// tape so gradients account for it).
    fn run_seq(&self, tape: &mut Tape, batch: &ForecastBatch, scaler: &Scaler) -> Result<Vec<Var>> {
        let shape = batch.inputs.shape();
        if shape.len() != 4
            || shape[1] != self.config.history
            || shape[2] != self.config.num_nodes
            || shape[3] != self.config.in_channels
        {
            return Err(CoreError::BadShape {
                op: "run_seq",
                expected: format!(
                    "[B, {}, {}, {}] inputs",
                    self.config.history, self.config.num_nodes, self.config.in_channels
                ),
                shape: shape.to_vec(),
            });
        }
        let b = shape[0];
        let adjacency = self.build_adjacency(tape)?;

        // Encoder: h-1 transitions from a zero hidden state.
        let mut hidden = tape.constant(Tensor::zeros(&[
            b,
            self.config.num_nodes,
            self.config.hidden_dim,
        ]));
        for t in 0..self.config.history - 1 {
            let x_t = tape.constant(time_slice(&batch.inputs, t));
            let (next_hidden, _) = one_step_fast_gconv(
                tape,
                &self.store,
                &adjacency,
                x_t,
                hidden,
                &self.gru,
                self.conv_mode,
            )?;
            hidden = next_hidden;
        }

        // Decoder: start from the last observation, feed predictions back.
        let mut decoder_input = tape.constant(time_slice(&batch.inputs, self.config.history - 1));
        let mut predictions = Vec::with_capacity(self.config.horizon);
        for _ in 0..self.config.horizon {
            let (next_hidden, prediction) = one_step_fast_gconv(
                tape,
                &self.store,
                &adjacency,
                decoder_input,
                hidden,
                &self.gru,
                self.conv_mode,
            )?;
            hidden = next_hidden;
            let denormalized = tape.affine(prediction, scaler.std, scaler.mean)?;
            predictions.push(denormalized);
            decoder_input = self.pad_feedback(tape, prediction, b)?;
        }
        Ok(predictions)
    }

    /// Forward pass producing the masked MAE loss and the per-step
    /// denormalized predictions.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &ForecastBatch,
        scaler: &Scaler,
    ) -> Result<ForwardOutput> {
        let predictions = self.run_seq(tape, batch, scaler)?;
        let loss = masked_mae_loss(tape, &predictions, batch)?;
        Ok(ForwardOutput { loss, predictions })
    }

    /// Inference-only forward pass; returns `[B, f, N, C_out]` predictions
    /// in original units.
    pub fn predict_batch(&self, batch: &ForecastBatch, scaler: &Scaler) -> Result<Tensor> {
        let mut tape = Tape::new();
        let predictions = self.run_seq(&mut tape, batch, scaler)?;
        let b = batch.inputs.shape()[0];
        let n = self.config.num_nodes;
        let c = self.config.out_channels;
        let f = self.config.horizon;
        let mut out = Tensor::zeros(&[b, f, n, c]);
        for (t, var) in predictions.iter().enumerate() {
            let step = tape.value(*var)?;
            let src = step.data();
            let dst = out.data_mut();
            for bi in 0..b {
                let from = bi * n * c;
                let to = (bi * f + t) * n * c;
                dst[to..to + n * c].copy_from_slice(&src[from..from + n * c]);
            }
        }
        Ok(out)
    }
}

pub struct ForwardOutput {
    pub loss: Var,
    pub predictions: Vec<Var>,
}

/// Masked mean absolute error over all supervised positions of the horizon:
/// `sum(mask .* |target - pred|) / sum(mask)`.
pub fn masked_mae_loss(
    tape: &mut Tape,
    predictions: &[Var],
    batch: &ForecastBatch,
) -> Result<Var> {
    let tshape = batch.targets.shape().to_vec();
    let (b, f, n, c) = (tshape[0], tshape[1], tshape[2], tshape[3]);
    if predictions.len() != f {
        return Err(CoreError::BadShape {
            op: "masked_mae_loss",
            expected: format!("{f} prediction steps"),
            shape: vec![predictions.len()],
        });
    }

    let mask_total: f64 = batch.mask.data().iter().sum::<f64>() * c as f64;
    if mask_total == 0.0 {
        return Err(CoreError::EmptySupervision);
    }

    let mut total: Option<Var> = None;
    for (t, &pred) in predictions.iter().enumerate() {
        let target = tape.constant(time_slice(&batch.targets, t));
        // Tile the [B, N] mask across output channels.
        let mut mask_step = Tensor::zeros(&[b, n, c]);
        {
            let src = batch.mask.data();
            let dst = mask_step.data_mut();
            for bi in 0..b {
                for node in 0..n {
                    let bit = src[(bi * f + t) * n + node];
                    for ch in 0..c {
                        dst[(bi * n + node) * c + ch] = bit;
                    }
                }
            }
        }
        let mask = tape.constant(mask_step);
        let diff = tape.sub(target, pred)?;
        let abs = tape.abs(diff)?;
        let masked = tape.hadamard(abs, mask)?;
        let step_sum = tape.sum_all(masked)?;
        total = Some(match total {
            None => step_sum,
            Some(acc) => tape.add(acc, step_sum)?,
        });
    }
    tape.scale(total.expect("horizon >= 1"), 1.0 / mask_total)
}

/// Masked metrics of a trained model at the requested 1-based horizons.
pub fn evaluate(
    model: &Forecaster,
    batches: &[ForecastBatch],
    scaler: &Scaler,
    horizons: &[usize],
) -> Result<BTreeMap<usize, Metrics>> {
    for &h in horizons {
        if h == 0 || h > model.config().horizon {
            return Err(CoreError::InvalidConfig(format!(
                "horizon {h} outside 1..={}",
                model.config().horizon
            )));
        }
    }
    let mut accumulators: BTreeMap<usize, MetricsAccumulator> = horizons
        .iter()
        .map(|&h| (h, MetricsAccumulator::new()))
        .collect();
    for batch in batches {
        let preds = model.predict_batch(batch, scaler)?;
        accumulate_horizons(&preds, batch, &mut accumulators);
    }
    Ok(accumulators
        .into_iter()
        .map(|(h, acc)| (h, acc.finish()))
        .collect())
}

/// Masked MAE aggregated over every horizon step; the validation signal.
pub fn masked_mae_all(
    model: &Forecaster,
    batches: &[ForecastBatch],
    scaler: &Scaler,
) -> Result<f64> {
    let mut acc = MetricsAccumulator::new();
    let f = model.config().horizon;
    let mut horizons: BTreeMap<usize, MetricsAccumulator> =
        (1..=f).map(|h| (h, MetricsAccumulator::new())).collect();
    for batch in batches {
        let preds = model.predict_batch(batch, scaler)?;
        accumulate_horizons(&preds, batch, &mut horizons);
    }
    for (_, h_acc) in horizons {
        acc.merge(&h_acc);
    }
    Ok(acc.mae())
}

/// Metrics of the persistence baseline: every future step is predicted to
/// equal the last observed value (in original units).
pub fn evaluate_persistence(
    batches: &[ForecastBatch],
    scaler: &Scaler,
    horizons: &[usize],
    history: usize,
) -> Result<BTreeMap<usize, Metrics>> {
    let mut accumulators: BTreeMap<usize, MetricsAccumulator> = horizons
        .iter()
        .map(|&h| (h, MetricsAccumulator::new()))
        .collect();
    for batch in batches {
        let ishape = batch.inputs.shape().to_vec();
        let (b, n) = (ishape[0], ishape[2]);
        let c_in = ishape[3];
        let tshape = batch.targets.shape().to_vec();
        let (f, c) = (tshape[1], tshape[3]);
        for bi in 0..b {
            for node in 0..n {
                let last_scaled =
                    batch.inputs.data()[((bi * history + (history - 1)) * n + node) * c_in];
                let last = scaler.inverse(last_scaled);
                for (&h, acc) in accumulators.iter_mut() {
                    let t = h - 1;
                    let mask = batch.mask.data()[(bi * f + t) * n + node];
                    if mask > 0.0 {
                        for ch in 0..c {
                            let target = batch.targets.data()[((bi * f + t) * n + node) * c + ch];
                            acc.add(last, target);
                        }
                    }
                }
            }
        }
    }
    Ok(accumulators
        .into_iter()
        .map(|(h, acc)| (h, acc.finish()))
        .collect())
}

fn accumulate_horizons(
    preds: &Tensor,
    batch: &ForecastBatch,
    accumulators: &mut BTreeMap<usize, MetricsAccumulator>,
) {
    let tshape = batch.targets.shape();
    let (b, f, n, c) = (tshape[0], tshape[1], tshape[2], tshape[3]);
    for (&h, acc) in accumulators.iter_mut() {
        let t = h - 1;
        for bi in 0..b {
            for node in 0..n {
                let mask = batch.mask.data()[(bi * f + t) * n + node];
                if mask > 0.0 {
                    for ch in 0..c {
                        let idx = ((bi * f + t) * n + node) * c + ch;
                        acc.add(preds.data()[idx], batch.targets.data()[idx]);
                    }
                }
            }
        }
    }
}
