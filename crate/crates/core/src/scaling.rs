//! Scaling probes for the memory/time benchmark.
//!
//! One probe builds the full adjacency-learning pipeline at a given node
//! count (embedding init, candidate pools, significant-neighbor sampling,
//! sparse attention) and pushes one forward/backward step of a graph
//! convolution over random data through it. The slim path touches nothing
//! of size N x N, so its working set grows linearly in N at fixed M; the
//! dense reference route pairs every node with every node and grows
//! quadratically. Peak-allocation measurements around the probe make that
//! contrast observable.

use rand::Rng;

use crate::diffusion::{fast_graph_conv, register_diffusion, ConvMode};
use crate::error::Result;
use crate::graph::{compute_slim_adjacency, init_candidates, register_attention};
use crate::param::{uniform_init, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub num_nodes: usize,
    pub neighborhood: usize,
    pub top_k: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub alpha: f64,
    pub diffusion_steps: usize,
    pub channels: usize,
    pub dense: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            num_nodes: 500,
            neighborhood: 100,
            top_k: 80,
            embed_dim: 8,
            heads: 2,
            alpha: 2.0,
            diffusion_steps: 2,
            channels: 4,
            dense: false,
            seed: 1,
        }
    }
}

/// Runs one adjacency-learning forward/backward step. Returns a checksum of
/// the embedding gradient so the work cannot be optimized away.
pub fn adjacency_probe(config: &ProbeConfig) -> Result<f64> {
    let mut rng = crate::rng::stream(config.seed, crate::rng::StreamKind::Probe, 0);
    let mut store = ParamStore::new();
    let embedding_slot = store.register(
        "embedding",
        uniform_init(
            &mut rng,
            &[config.num_nodes, config.embed_dim],
            config.embed_dim,
        ),
    );
    let attention = register_attention(&mut store, config.embed_dim, config.heads, &mut rng);
    let taps = register_diffusion(
        &mut store,
        "probe.conv",
        config.channels,
        config.channels,
        config.diffusion_steps,
        &mut rng,
    );

    let (index_set, mode) = if config.dense {
        ((0..config.num_nodes).collect::<Vec<_>>(), ConvMode::Dense)
    } else {
        let mut candidates =
            init_candidates(config.num_nodes, config.neighborhood, config.seed)?;
        let index_set = candidates.sample_significant(
            store.value(embedding_slot),
            config.top_k,
            crate::rng::derive_seed(config.seed, 0),
        )?;
        (index_set, ConvMode::Slim)
    };

    let mut tape = Tape::new();
    let embedding = tape.param(&store, embedding_slot);
    let adjacency = compute_slim_adjacency(
        &mut tape,
        &store,
        &attention,
        embedding,
        &index_set,
        config.alpha,
    )?;

    let x = Tensor::new(
        vec![1, config.num_nodes, config.channels],
        (0..config.num_nodes * config.channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let x = tape.constant(x);
    let conv = fast_graph_conv(&mut tape, &store, &adjacency, x, &taps, mode)?;

    let conv_sum = tape.sum_all(conv)?;
    let adj_sum = tape.sum_all(adjacency.weights)?;
    let loss = tape.add(conv_sum, adj_sum)?;
    tape.backward(loss, &mut store)?;

    Ok(store.grad(embedding_slot).data().iter().sum())
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "slope needs at least two points");
    let lx: Vec<f64> = xs.iter().map(|&x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}
