//! Return and evaluation formulas.
//!
//! Series are indexed by step `0..T`. `values` are target-scaled, `precosts`
//! are clearing prices before correction and `corrections` the applied
//! per-step correction totals.

use serde::{Deserialize, Serialize};

use crate::domain::StepRecord;

/// Lower edge of the achievement band for the TCPA/CPA ratio.
pub const ACHIEVED_LO: f64 = 0.8;
/// Upper edge of the achievement band for the TCPA/CPA ratio.
pub const ACHIEVED_HI: f64 = 1.2;

/// Ratio substituted when the remaining deficit vanishes but corrections
/// are still pending.
const DEGENERATE_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSeries {
    pub values: Vec<f64>,
    pub precosts: Vec<f64>,
    pub corrections: Vec<f64>,
}

impl EpisodeSeries {
    pub fn new(values: Vec<f64>, precosts: Vec<f64>, corrections: Vec<f64>) -> Self {
        assert_eq!(values.len(), precosts.len());
        assert_eq!(values.len(), corrections.len());
        Self {
            values,
            precosts,
            corrections,
        }
    }

    pub fn from_history(history: &[StepRecord]) -> Self {
        Self {
            values: history.iter().map(|r| r.value).collect(),
            precosts: history.iter().map(|r| r.precost).collect(),
            corrections: history.iter().map(|r| r.correction).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn payments(&self) -> Vec<f64> {
        self.precosts
            .iter()
            .zip(&self.corrections)
            .map(|(c, y)| c + y)
            .collect()
    }
}

/// `min((V / C)^2, 1) * V`, with no penalty when nothing was spent.
pub fn penalized_value(value: f64, cost: f64) -> f64 {
    if value <= 0.0 {
        return 0.0;
    }
    if cost <= 0.0 {
        return value;
    }
    let ratio = value / cost;
    (ratio * ratio).min(1.0) * value
}

/// Penalised value of the remaining episode from step `t` on, using
/// pre-correction costs. Entries before `t` and all corrections are ignored.
pub fn rtg_bid_memoryless(series: &EpisodeSeries, t: usize) -> f64 {
    let t = t.min(series.len());
    let v: f64 = series.values[t..].iter().sum();
    let c: f64 = series.precosts[t..].iter().sum();
    penalized_value(v, c)
}

/// Pricing return in `[0, 1]`: closeness of total post-correction cost to
/// total value, raised to a power that grows when the corrections still to
/// come from `t` on miss the remaining deficit.
pub fn rtg_price(series: &EpisodeSeries, t: usize) -> f64 {
    let n = series.len();
    let sum_v: f64 = series.values.iter().sum();
    let sum_c: f64 = series.precosts.iter().sum();
    let sum_y: f64 = series.corrections.iter().sum();
    let sum_pay = sum_c + sum_y;

    let base = if sum_v == 0.0 && sum_pay == 0.0 {
        return 1.0;
    } else if sum_v <= 0.0 || sum_pay <= 0.0 {
        0.0
    } else {
        (sum_v / sum_pay).min(sum_pay / sum_v)
    };
    if !(base > 0.0) {
        return 0.0;
    }

    let future_y: f64 = series.corrections[t.min(n)..].iter().sum();
    let prefix_y: f64 = series.corrections[..(t + 1).min(n)].iter().sum();
    let deficit = sum_v - sum_c - prefix_y;
    let eps = 1e-9 * sum_v.abs();
    let ratio = if deficit.abs() < eps {
        if future_y.abs() < eps {
            1.0
        } else {
            DEGENERATE_RATIO.copysign(future_y)
        }
    } else {
        future_y / deficit
    };
    let exponent = 2.0 * (ratio - 1.0).abs() + 1.0;
    let r = base.powf(exponent);
    if r.is_finite() {
        r.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// History-aware bidding return: whole-episode penalised value minus the
/// penalised value of the first `t - 1` steps. `t` is one-based and may be
/// `T + 1`, where the prefix is the whole episode and the result is zero.
pub fn rtg_bid_historical(series: &EpisodeSeries, t: usize) -> f64 {
    assert!(t >= 1, "historical return is one-based");
    let prefix = (t - 1).min(series.len());
    let full = penalized_value(series.values.iter().sum(), series.precosts.iter().sum());
    let head = penalized_value(
        series.values[..prefix].iter().sum(),
        series.precosts[..prefix].iter().sum(),
    );
    full - head
}

/// `min((sum v / sum c)^2, 1) * sum v`.
pub fn score(values: &[f64], costs: &[f64]) -> f64 {
    assert_eq!(values.len(), costs.len());
    penalized_value(values.iter().sum(), costs.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpaReport {
    /// TCPA / CPA, which with scaled values is `sum v / sum payments`.
    pub ratio: f64,
    pub achieved: bool,
}

pub fn cpa_report(values: &[f64], payments: &[f64]) -> CpaReport {
    let v: f64 = values.iter().sum();
    let p: f64 = payments.iter().sum();
    if p > 0.0 {
        let ratio = v / p;
        CpaReport {
            ratio,
            achieved: (ACHIEVED_LO..=ACHIEVED_HI).contains(&ratio),
        }
    } else {
        CpaReport {
            ratio: f64::INFINITY,
            achieved: v == 0.0,
        }
    }
}
