//! Masked forecasting metrics: MAE, RMSE, MAPE.

use serde::{Deserialize, Serialize};

/// Targets with magnitude below this are excluded from MAPE to keep the
/// division stable.
pub const MAPE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Streaming accumulator over masked (prediction, target) pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    abs_sum: f64,
    sq_sum: f64,
    count: usize,
    ape_sum: f64,
    ape_count: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, prediction: f64, target: f64) {
        let err = target - prediction;
        self.abs_sum += err.abs();
        self.sq_sum += err * err;
        self.count += 1;
        if target.abs() >= MAPE_FLOOR {
            self.ape_sum += err.abs() / target.abs();
            self.ape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.abs_sum += other.abs_sum;
        self.sq_sum += other.sq_sum;
        self.count += other.count;
        self.ape_sum += other.ape_sum;
        self.ape_count += other.ape_count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mae(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.abs_sum / self.count as f64
        }
    }

    pub fn finish(&self) -> Metrics {
        if self.count == 0 {
            return Metrics {
                mae: 0.0,
                rmse: 0.0,
                mape: 0.0,
            };
        }
        Metrics {
            mae: self.abs_sum / self.count as f64,
            rmse: (self.sq_sum / self.count as f64).sqrt(),
            mape: if self.ape_count == 0 {
                0.0
            } else {
                self.ape_sum / self.ape_count as f64
            },
        }
    }
}
