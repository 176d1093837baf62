//! Teacher-spend projection at a given coverage.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceModel {
    /// Cost of 1,000 teacher calls.
    pub rate_per_1000: f64,
    /// Queries per day.
    pub daily_volume: f64,
}

impl Default for PriceModel {
    fn default() -> Self {
        Self {
            rate_per_1000: 2.60,
            daily_volume: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProjection {
    pub daily_cost: f64,
    pub yearly_cost: f64,
    pub saving_fraction: f64,
    /// Daily cost with every query sent to the teacher.
    pub teacher_only_daily: f64,
    pub yearly_saving: f64,
}

/// Only deferred traffic reaches the teacher.
///
/// # Panics
///
/// Panics if `coverage` is outside `[0, 1]` or the price model is negative.
pub fn cost_projection(coverage: f64, price: PriceModel) -> CostProjection {
    assert!((0.0..=1.0).contains(&coverage), "coverage {coverage} outside [0, 1]");
    assert!(price.rate_per_1000 >= 0.0 && price.daily_volume >= 0.0, "negative price model");
    let teacher_only_daily = price.daily_volume / 1000.0 * price.rate_per_1000;
    let daily_cost = teacher_only_daily * (1.0 - coverage);
    CostProjection {
        daily_cost,
        yearly_cost: daily_cost * 365.0,
        saving_fraction: coverage,
        teacher_only_daily,
        yearly_saving: (teacher_only_daily - daily_cost) * 365.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_offload_projection() {
        let p = cost_projection(0.832, PriceModel::default());
        // 26.00 * 0.168
        assert!((p.daily_cost - 4.368).abs() < 1e-9);
        assert_eq!(p.saving_fraction, 0.832);
        assert!((p.yearly_saving - 7895.68).abs() < 1e-6);
    }

    #[test]
    fn endpoints() {
        assert_eq!(cost_projection(1.0, PriceModel::default()).daily_cost, 0.0);
        assert!((cost_projection(0.0, PriceModel::default()).daily_cost - 26.0).abs() < 1e-12);
    }
}
