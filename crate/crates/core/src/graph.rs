//! Learned graph structure: candidate neighbor pools, significant-neighbor
//! sampling, and the sparse multi-head attention that produces the slim
//! N x M adjacency.
//!
//! The point of the slim adjacency is that nothing here is ever N x N. Each
//! node keeps a fixed pool of M candidate neighbors; sampling ranks
//! candidates by embedding distance, counts which node ids dominate the
//! front of the queues, and returns the M globally influential ids (top-K by
//! frequency plus M-K random exploration slots). Attention then scores each
//! node against those M ids only.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::param::{uniform_init, uniform_init_positive, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed candidate pools, one row of M distinct node ids per node. Row `i`
/// never contains `i` itself; self-information enters the diffusion through
/// its explicit self term instead. Membership is fixed at construction; the
/// order within a row is re-sorted by embedding distance on every sampling
/// call.
#[derive(Debug, Clone)]
pub struct CandidateMatrix {
    rows: Vec<Vec<usize>>,
    num_nodes: usize,
    pool_size: usize,
}

/// Builds the candidate matrix: each row holds `pool_size` distinct uniform
/// draws from all other node ids. Deterministic for a given seed.
pub fn init_candidates(num_nodes: usize, pool_size: usize, seed: u64) -> Result<CandidateMatrix> {
    if pool_size == 0 || pool_size >= num_nodes {
        return Err(CoreError::InvalidConfig(format!(
            "candidate pool size must satisfy 1 <= M < N, got M = {pool_size}, N = {num_nodes}"
        )));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Candidates, 0);
    let rows = (0..num_nodes)
        .map(|i| {
            index_sample(&mut rng, num_nodes - 1, pool_size)
                .into_iter()
                .map(|x| if x >= i { x + 1 } else { x })
                .collect()
        })
        .collect();
    Ok(CandidateMatrix {
        rows,
        num_nodes,
        pool_size,
    })
}

impl CandidateMatrix {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    /// Significant-neighbor sampling.
    ///
    /// Sorts every candidate row in place by Euclidean distance in the
    /// embedding space (ties broken toward the lower node id), counts id
    /// frequencies over the first `top_k` positions of all rows, keeps the
    /// `top_k` most frequent ids, and fills the remaining `M - top_k` slots
    /// with a uniform sample from the not-selected nodes to keep
    /// exploration alive. Returns the ordered index set of M distinct ids.
    pub fn sample_significant(
        &mut self,
        embedding: &Tensor,
        top_k: usize,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if top_k >= self.pool_size {
            return Err(CoreError::InvalidConfig(format!(
                "top-K must satisfy K < M, got K = {top_k}, M = {}",
                self.pool_size
            )));
        }
        if embedding.rank() != 2 || embedding.shape()[0] != self.num_nodes {
            return Err(CoreError::BadShape {
                op: "sample_significant",
                expected: format!("[{}, d] embedding", self.num_nodes),
                shape: embedding.shape().to_vec(),
            });
        }
        if !embedding.all_finite() {
            return Err(CoreError::NonFinite {
                op: "sample_significant",
            });
        }

        let d = embedding.shape()[1];
        let e = embedding.data();
        for (i, row) in self.rows.iter_mut().enumerate() {
            let anchor = &e[i * d..(i + 1) * d];
            // Squared distance preserves the Euclidean ordering.
            let mut keyed: Vec<(f64, usize)> = row
                .iter()
                .map(|&j| {
                    let other = &e[j * d..(j + 1) * d];
                    let dist: f64 = anchor
                        .iter()
                        .zip(other)
                        .map(|(&x, &y)| (x - y) * (x - y))
                        .sum();
                    (dist, j)
                })
                .collect();
            keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (dst, (_, j)) in row.iter_mut().zip(keyed) {
                *dst = j;
            }
        }

        let mut counts = vec![0usize; self.num_nodes];
        for row in &self.rows {
            for &j in &row[..top_k] {
                counts[j] += 1;
            }
        }

        let mut ranked: Vec<usize> = (0..self.num_nodes).collect();
        ranked.sort_unstable_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let selected: Vec<usize> = ranked[..top_k].to_vec();

        let mut in_selected = vec![false; self.num_nodes];
        for &j in &selected {
            in_selected[j] = true;
        }
        let remaining: Vec<usize> = (0..self.num_nodes).filter(|&j| !in_selected[j]).collect();

        let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::NeighborSampling, 0);
        let extra = index_sample(&mut rng, remaining.len(), self.pool_size - top_k);

        let mut index_set = selected;
        index_set.extend(extra.into_iter().map(|x| remaining[x]));
        Ok(index_set)
    }
}

/// Parameter slots for one attention head's feed-forward scorer: a hidden
/// tanh layer of width 2d followed by a linear map to the
/// (likely, unlikely) score pair.
#[derive(Debug, Clone)]
pub struct HeadSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// All attention parameters: P scoring heads plus the 2P -> 1 output
/// projection that mixes head scores into adjacency entries.
#[derive(Debug, Clone)]
pub struct AttentionSlots {
    pub heads: Vec<HeadSlots>,
    pub out_proj: usize,
}

pub fn register_attention(
    store: &mut ParamStore,
    embed_dim: usize,
    num_heads: usize,
    rng: &mut impl Rng,
) -> AttentionSlots {
    assert!(num_heads >= 1, "at least one attention head required");
    let two_d = 2 * embed_dim;
    let heads = (0..num_heads)
        .map(|p| HeadSlots {
            w1: store.register(format!("attn.head{p}.w1"), uniform_init(rng, &[two_d, two_d], two_d)),
            b1: store.register(format!("attn.head{p}.b1"), uniform_init(rng, &[two_d], two_d)),
            w2: store.register(format!("attn.head{p}.w2"), uniform_init(rng, &[two_d, 2], two_d)),
            b2: store.register(format!("attn.head{p}.b2"), uniform_init(rng, &[2], two_d)),
        })
        .collect();
    let out_proj = store.register(
        "attn.out_proj",
        uniform_init_positive(rng, &[2 * num_heads, 1], 2 * num_heads),
    );
    AttentionSlots { heads, out_proj }
}

/// The learned slim adjacency, live on a tape: an N x M nonnegative weight
/// matrix, its per-node degree normalizer `1 / (1 + rowsum)`, and the index
/// set naming which node feeds each column.
pub struct SlimAdjacency {
    pub weights: Var,
    pub inv_degree: Var,
    pub index_set: Vec<usize>,
    pub num_nodes: usize,
}

/// Sparse spatial multi-head attention.
///
/// For every node i, concatenates its embedding with each significant
/// neighbor's embedding, scores the pairs with P feed-forward heads,
/// normalizes each score column across the M candidates with alpha-entmax,
/// and projects the stacked head scores to a single nonnegative weight per
/// (node, neighbor) pair. Everything is tape-recorded, so gradients flow to
/// the embedding, the head networks, and the output projection.
///
/// The raw projection can go negative, which would break the degree
/// normalization downstream, so the output is rectified.
pub fn compute_slim_adjacency(
    tape: &mut Tape,
    store: &ParamStore,
    slots: &AttentionSlots,
    embedding: Var,
    index_set: &[usize],
    alpha: f64,
) -> Result<SlimAdjacency> {
    let eshape = tape.value(embedding)?.shape().to_vec();
    if eshape.len() != 2 {
        return Err(CoreError::BadShape {
            op: "compute_slim_adjacency",
            expected: "rank 2 embedding".into(),
            shape: eshape,
        });
    }
    let num_nodes = eshape[0];
    let m = index_set.len();
    assert!(m >= 1, "empty index set");

    let pairs = tape.pair_concat(embedding, index_set)?; // [(N*M), 2d]

    let mut head_scores: Option<Var> = None;
    for head in &slots.heads {
        let w1 = tape.param(store, head.w1);
        let b1 = tape.param(store, head.b1);
        let w2 = tape.param(store, head.w2);
        let b2 = tape.param(store, head.b2);

        let hidden = tape.matmul(pairs, w1)?;
        let hidden = tape.add_channel_vec(hidden, b1)?;
        let hidden = tape.tanh(hidden)?;
        let scores = tape.matmul(hidden, w2)?;
        let scores = tape.add_channel_vec(scores, b2)?; // [(N*M), 2]
        let normalized = tape.entmax_blocked(scores, alpha, m)?;

        head_scores = Some(match head_scores {
            None => normalized,
            Some(acc) => tape.concat_last(acc, normalized)?,
        });
    }
    let stacked = head_scores.expect("at least one head"); // [(N*M), 2P]

    let out_proj = tape.param(store, slots.out_proj);
    let raw = tape.matmul(stacked, out_proj)?; // [(N*M), 1]
    let rectified = tape.relu(raw)?;
    let weights = tape.reshape(rectified, &[num_nodes, m])?;

    let degree = tape.sum_last(weights)?;
    let inv_degree = tape.inv1p(degree)?;

    Ok(SlimAdjacency {
        weights,
        inv_degree,
        index_set: index_set.to_vec(),
        num_nodes,
    })
}

/// An all-zero adjacency over the given index set. Diffusion over it reduces
/// to per-node channel mixing; used by the no-graph ablation.
pub fn zero_adjacency(tape: &mut Tape, num_nodes: usize, index_set: &[usize]) -> SlimAdjacency {
    let weights = tape.constant(Tensor::zeros(&[num_nodes, index_set.len()]));
    let inv_degree = tape.constant(Tensor::full(&[num_nodes], 1.0));
    SlimAdjacency {
        weights,
        inv_degree,
        index_set: index_set.to_vec(),
        num_nodes,
    }
}
