//! Graph diffusion over the slim adjacency and the recurrent cell built
//! from it.
//!
//! The diffusion operator is `P(X) = (D + I)^-1 (A_s X_I + X)`: incoming
//! information aggregated from the M significant neighbors, plus each
//! node's own signal, normalized per receiving node. `A_s X_I` is an
//! N x M times M x c product over gathered rows, so one application costs
//! O(N M c) and no N x N object is ever formed. The convolution applies the
//! operator 0..J-1 times and mixes each stage with its own channel map:
//! `sum_j P^j(X) W_j`.

use crate::error::{CoreError, Result};
use crate::graph::SlimAdjacency;
use crate::param::{uniform_init, ParamStore};
use crate::tape::{Tape, Var};

/// Selects how `A_s X_I` is evaluated. `Slim` is the production path
/// (gather + N x M product). `Dense` multiplies the full matrix against all
/// nodes and exists as the quadratic reference route; it requires M = N
/// with the identity index set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvMode {
    #[default]
    Slim,
    Dense,
}

/// Per-stage channel maps `W_0..W_{J-1}`, each `[c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct DiffusionSlots {
    pub taps: Vec<usize>,
}

pub fn register_diffusion(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    depth: usize,
    rng: &mut impl rand::Rng,
) -> DiffusionSlots {
    assert!(depth >= 1, "diffusion depth must be >= 1");
    let taps = (0..depth)
        .map(|j| store.register(format!("{name}.w{j}"), uniform_init(rng, &[c_in, c_out], c_in)))
        .collect();
    DiffusionSlots { taps }
}

/// Applies a 2D channel map to the trailing axis of a batched input.
fn apply_channel_map(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    tape.matmul(x, w)
}

/// Fast graph convolution: `sum_{j=0}^{J-1} P^j(X) W_j` with
/// `P(X) = (D + I)^-1 (A_s X_I + X)`.
///
/// `x` is `[batch, N, c_in]`. The `j = 0` term is the input itself, so with
/// depth 1 the adjacency does not participate at all.
pub fn fast_graph_conv(
    tape: &mut Tape,
    store: &ParamStore,
    adjacency: &SlimAdjacency,
    x: Var,
    slots: &DiffusionSlots,
    mode: ConvMode,
) -> Result<Var> {
    let xs = tape.value(x)?.shape().to_vec();
    if xs.len() != 3 {
        return Err(CoreError::BadShape {
            op: "fast_graph_conv",
            expected: "[batch, N, c] input".into(),
            shape: xs,
        });
    }
    if xs[1] != adjacency.num_nodes {
        return Err(CoreError::BadShape {
            op: "fast_graph_conv",
            expected: format!("node axis of {}", adjacency.num_nodes),
            shape: xs,
        });
    }
    let aval = tape.value(adjacency.weights)?;
    if !aval.all_finite() {
        return Err(CoreError::NonFinite {
            op: "fast_graph_conv",
        });
    }
    if mode == ConvMode::Dense {
        let identity = adjacency.num_nodes == adjacency.index_set.len()
            && adjacency.index_set.iter().enumerate().all(|(i, &j)| i == j);
        if !identity {
            return Err(CoreError::InvalidConfig(
                "dense mode requires M = N with the identity index set".into(),
            ));
        }
    }

    let w0 = tape.param(store, slots.taps[0]);
    let mut out = apply_channel_map(tape, x, w0)?;
    let mut stage = x;
    for &tap in &slots.taps[1..] {
        let aggregated = match mode {
            ConvMode::Slim => {
                let gathered = tape.gather_nodes(stage, &adjacency.index_set)?;
                tape.matmul(adjacency.weights, gathered)?
            }
            ConvMode::Dense => tape.matmul(adjacency.weights, stage)?,
        };
        let with_self = tape.add(aggregated, stage)?;
        stage = tape.scale_nodes(with_self, adjacency.inv_degree)?;
        let w = tape.param(store, tap);
        let mapped = apply_channel_map(tape, stage, w)?;
        out = tape.add(out, mapped)?;
    }
    Ok(out)
}

/// Parameter slots of the graph-convolutional GRU cell: one diffusion block
/// per gate, gate biases, and the output projection.
#[derive(Debug, Clone)]
pub struct GruSlots {
    pub reset: DiffusionSlots,
    pub update: DiffusionSlots,
    pub candidate: DiffusionSlots,
    pub bias_reset: usize,
    pub bias_update: usize,
    pub bias_candidate: usize,
    pub out_proj: usize,
    pub hidden_dim: usize,
}

pub fn register_gru(
    store: &mut ParamStore,
    in_channels: usize,
    hidden_dim: usize,
    out_channels: usize,
    depth: usize,
    rng: &mut impl rand::Rng,
) -> GruSlots {
    let gate_in = in_channels + hidden_dim;
    let reset = register_diffusion(store, "gru.reset", gate_in, hidden_dim, depth, rng);
    let update = register_diffusion(store, "gru.update", gate_in, hidden_dim, depth, rng);
    let candidate = register_diffusion(store, "gru.candidate", gate_in, hidden_dim, depth, rng);
    GruSlots {
        reset,
        update,
        candidate,
        bias_reset: store.register("gru.bias_reset", crate::tensor::Tensor::zeros(&[hidden_dim])),
        bias_update: store.register("gru.bias_update", crate::tensor::Tensor::zeros(&[hidden_dim])),
        bias_candidate: store.register(
            "gru.bias_candidate",
            crate::tensor::Tensor::zeros(&[hidden_dim]),
        ),
        out_proj: store.register(
            "gru.out_proj",
            uniform_init(rng, &[hidden_dim, out_channels], hidden_dim),
        ),
        hidden_dim,
    }
}

/// One step of the graph-convolutional GRU.
///
/// Reset and update gates are sigmoids of graph convolutions over the
/// concatenated input and previous hidden state; the candidate state is a
/// tanh of a convolution over the input and the reset-scaled hidden state;
/// the new hidden state is the usual convex combination, and the prediction
/// is a linear readout of it.
///
/// Returns `(hidden_state, prediction)`.
pub fn one_step_fast_gconv(
    tape: &mut Tape,
    store: &ParamStore,
    adjacency: &SlimAdjacency,
    x_t: Var,
    h_prev: Var,
    slots: &GruSlots,
    mode: ConvMode,
) -> Result<(Var, Var)> {
    let xs = tape.value(x_t)?.shape().to_vec();
    let hs = tape.value(h_prev)?.shape().to_vec();
    if xs.len() != 3 || hs.len() != 3 || xs[..2] != hs[..2] || hs[2] != slots.hidden_dim {
        return Err(CoreError::ShapeMismatch {
            op: "one_step_fast_gconv",
            lhs: xs,
            rhs: hs,
        });
    }

    let xh = tape.concat_last(x_t, h_prev)?;

    let b_r = tape.param(store, slots.bias_reset);
    let conv_r = fast_graph_conv(tape, store, adjacency, xh, &slots.reset, mode)?;
    let pre_reset = tape.add_channel_vec(conv_r, b_r)?;
    let reset = tape.sigmoid(pre_reset)?;

    let b_z = tape.param(store, slots.bias_update);
    let conv_z = fast_graph_conv(tape, store, adjacency, xh, &slots.update, mode)?;
    let pre_update = tape.add_channel_vec(conv_z, b_z)?;
    let update = tape.sigmoid(pre_update)?;

    let reset_hidden = tape.hadamard(reset, h_prev)?;
    let x_rh = tape.concat_last(x_t, reset_hidden)?;
    let b_h = tape.param(store, slots.bias_candidate);
    let conv_h = fast_graph_conv(tape, store, adjacency, x_rh, &slots.candidate, mode)?;
    let pre_candidate = tape.add_channel_vec(conv_h, b_h)?;
    let candidate = tape.tanh(pre_candidate)?;

    let keep = tape.hadamard(update, h_prev)?;
    let gate_complement = tape.one_minus(update)?;
    let take = tape.hadamard(gate_complement, candidate)?;
    let hidden = tape.add(keep, take)?;

    let w_x = tape.param(store, slots.out_proj);
    let prediction = apply_channel_map(tape, hidden, w_x)?;

    Ok((hidden, prediction))
}
