//! Synthetic planted-diffusion data.
//!
//! Generates a series whose next step is driven by a known sparse adjacency:
//! every node listens only to a small set of hub nodes, plus a per-node
//! seasonal component and observation noise. Because the driving graph and
//! hub set are returned alongside the data, tests can measure whether a
//! learned model recovers the planted structure and how far its error is
//! from the noise floor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{CoreError, Result};

/// Dynamics constants: `x_{t+1} = 0.6 A x_t + 0.3 s(t) + noise(0.05)`.
const COUPLING: f64 = 0.6;
const SEASONAL_AMP: f64 = 0.3;
const NOISE_STD: f64 = 0.05;

/// Steps per seasonal cycle.
const SEASONAL_PERIOD: f64 = 48.0;
/// 2021-05-01T00:00:00Z; starts exactly at midnight.
const START_TIMESTAMP: i64 = 1_619_827_200;
const INTERVAL_SECS: i64 = 300;

/// The planted structure behind a synthetic dataset, also written as a JSON
/// sidecar next to generated CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub num_nodes: usize,
    pub hubs: Vec<usize>,
    /// Row-major N x N row-normalized adjacency; columns outside `hubs` are
    /// identically zero.
    pub adjacency: Vec<f64>,
    pub coupling: f64,
    pub seasonal_amp: f64,
    pub noise_std: f64,
    pub seasonal_period: f64,
    /// Per-node seasonal phase offsets.
    pub phases: Vec<f64>,
}

impl GroundTruth {
    /// Expected next value given the current state; what an oracle with the
    /// true dynamics (but not the noise) would predict.
    pub fn one_step_forecast(&self, state: &[f64], step: usize) -> Vec<f64> {
        let n = self.num_nodes;
        (0..n)
            .map(|i| {
                let drift: f64 = (0..n)
                    .map(|j| self.adjacency[i * n + j] * state[j])
                    .sum();
                self.coupling * drift + self.seasonal_amp * self.seasonal(i, step)
            })
            .collect()
    }

    pub fn seasonal(&self, node: usize, step: usize) -> f64 {
        (2.0 * std::f64::consts::PI * step as f64 / self.seasonal_period + self.phases[node]).sin()
    }
}

/// Generates `steps` observations of `nodes` series driven by `hub_count`
/// hub nodes. Deterministic per seed.
pub fn synth_generate(
    nodes: usize,
    steps: usize,
    hub_count: usize,
    seed: u64,
) -> Result<(TimeSeriesDataset, GroundTruth)> {
    if hub_count == 0 || hub_count >= nodes {
        return Err(CoreError::InvalidConfig(format!(
            "hub count must satisfy 1 <= hubs < nodes, got {hub_count} of {nodes}"
        )));
    }
    if steps < 2 {
        return Err(CoreError::InvalidConfig("need at least 2 steps".into()));
    }

    let mut rng = crate::rng::stream(seed, crate::rng::StreamKind::Synthetic, 0);
    let hubs: Vec<usize> = rand::seq::index::sample(&mut rng, nodes, hub_count).into_vec();

    let mut adjacency = vec![0.0; nodes * nodes];
    for i in 0..nodes {
        let weights: Vec<f64> = (0..hub_count).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        for (h, &w) in hubs.iter().zip(&weights) {
            adjacency[i * nodes + h] = w / total;
        }
    }

    let phases: Vec<f64> = (0..nodes)
        .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();

    let truth = GroundTruth {
        num_nodes: nodes,
        hubs,
        adjacency,
        coupling: COUPLING,
        seasonal_amp: SEASONAL_AMP,
        noise_std: NOISE_STD,
        seasonal_period: SEASONAL_PERIOD,
        phases,
    };

    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut state: Vec<f64> = (0..nodes).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut values = Vec::with_capacity(steps * nodes);
    values.extend_from_slice(&state);
    for step in 0..steps - 1 {
        let drift = truth.one_step_forecast(&state, step);
        state = drift
            .into_iter()
            .map(|d| d + noise.sample(&mut rng))
            .collect();
        values.extend_from_slice(&state);
    }

    let timestamps: Vec<i64> = (0..steps as i64)
        .map(|i| START_TIMESTAMP + i * INTERVAL_SECS)
        .collect();
    let node_names = (0..nodes).map(|i| format!("node{i}")).collect();
    let mask = vec![true; steps * nodes];
    let dataset = TimeSeriesDataset::new(node_names, timestamps, values, mask)?;
    Ok((dataset, truth))
}
