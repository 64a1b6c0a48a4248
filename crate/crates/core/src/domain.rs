//! Value-domain types and the accounting rules shared by every module.
//!
//! Impression values are stored already multiplied by the advertiser's target
//! cost per unit of value, so the cost constraint reads `sum(cost) <= sum(value)`
//! and every return or score formula uses values and costs directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clip for ratio features, also the sentinel for a zero denominator.
pub const RATIO_CLIP: f64 = 10.0;

/// Number of features in the bidding view.
pub const BID_FEATURES: usize = 14;
/// Number of features in the pricing view.
pub const PRICE_FEATURES: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    /// Target-scaled value of the impression.
    pub value: f64,
    /// Highest competing bid; the clearing price if we win.
    pub competitor_price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionBatch {
    pub step: usize,
    pub impressions: Vec<Impression>,
}

impl ImpressionBatch {
    pub fn summary(&self) -> BatchSummary {
        BatchSummary {
            count: self.impressions.len(),
            total_value: self.impressions.iter().map(|i| i.value).sum(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.impressions.iter().all(|i| {
            i.value.is_finite()
                && i.value >= 0.0
                && i.competitor_price.is_finite()
                && i.competitor_price >= 0.0
        })
    }
}

/// What a bidder may know about the current step's traffic before bidding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub count: usize,
    pub total_value: f64,
}

impl BatchSummary {
    pub fn mean_value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_value / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub budget: f64,
    /// Target cost per unit of raw value. Only used to report in raw units.
    pub tcpa: f64,
    pub horizon: usize,
}

impl ConstraintSpec {
    pub fn new(budget: f64, tcpa: f64, horizon: usize) -> Result<Self> {
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::config("budget", "must be finite and > 0"));
        }
        if !(tcpa > 0.0 && tcpa.is_finite()) {
            return Err(Error::config("tcpa", "must be finite and > 0"));
        }
        if horizon == 0 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        Ok(Self {
            budget,
            tcpa,
            horizon,
        })
    }
}

/// Per-step accounting entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub value: f64,
    /// Sum of clearing prices of the won impressions, before correction.
    pub precost: f64,
    /// Applied correction: payment minus precost (negative for refunds).
    pub correction: f64,
    pub wins: usize,
    pub impressions: usize,
}

impl StepRecord {
    pub fn payment(&self) -> f64 {
        self.precost + self.correction
    }
}

/// Running accounting of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub t: usize,
    pub budget: f64,
    pub cum_value: f64,
    pub cum_precost: f64,
    pub cum_correction: f64,
    pub budget_spent: f64,
    pub wins_total: usize,
    pub history: Vec<StepRecord>,
}

impl Ledger {
    pub fn new(budget: f64) -> Self {
        Self {
            t: 0,
            budget,
            cum_value: 0.0,
            cum_precost: 0.0,
            cum_correction: 0.0,
            budget_spent: 0.0,
            wins_total: 0,
            history: Vec::new(),
        }
    }

    /// Returns a ledger advanced by one step; `self` is untouched.
    pub fn advanced(&self, record: StepRecord) -> Self {
        let mut next = self.clone();
        next.push(record);
        next
    }

    pub(crate) fn push(&mut self, record: StepRecord) {
        self.t += 1;
        self.cum_value += record.value;
        self.cum_precost += record.precost;
        self.cum_correction += record.correction;
        self.budget_spent += record.payment();
        self.wins_total += record.wins;
        self.history.push(record);
    }

    pub fn remaining_budget(&self) -> f64 {
        self.budget - self.budget_spent
    }

    /// Post-correction cumulative cost.
    pub fn cum_payment(&self) -> f64 {
        self.cum_precost + self.cum_correction
    }
}

/// Historical deficit: settled (post-correction) overspend relative to value,
/// clamped at zero.
pub fn compute_bal(ledger: &Ledger) -> f64 {
    (ledger.cum_payment() - ledger.cum_value).max(0.0)
}

/// Final payment of one won impression: clearing price plus offset, never
/// negative.
pub fn settle_payment(precost: f64, offset: f64) -> f64 {
    (precost + offset).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Bid,
    Price,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub kind: ViewKind,
    pub features: Vec<f64>,
}

/// Joint action of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Value multiplier: bid for impression `i` is `bid_multiplier * value_i`.
    pub bid_multiplier: f64,
    /// Additive currency offset applied to the payment of every won impression.
    pub price_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub a_max: f64,
    pub p_max: f64,
}

impl ActionBounds {
    pub fn clamp(&self, action: Action) -> Action {
        Action {
            bid_multiplier: action.bid_multiplier.clamp(0.0, self.a_max),
            price_offset: action.price_offset.clamp(-self.p_max, self.p_max),
        }
    }

    pub fn contains(&self, action: Action) -> bool {
        (0.0..=self.a_max).contains(&action.bid_multiplier)
            && (-self.p_max..=self.p_max).contains(&action.price_offset)
    }
}

/// Normalisation constants for the state views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub budget: f64,
    pub horizon: usize,
    pub mean_batch_size: f64,
}

impl FeatureScale {
    fn per_step_budget(&self) -> f64 {
        self.budget / self.horizon as f64
    }
}

fn clip_ratio(x: f64) -> f64 {
    if x.is_finite() {
        x.clamp(0.0, RATIO_CLIP)
    } else {
        RATIO_CLIP
    }
}

/// `num / den` clipped to `[0, 10]`; a zero denominator yields the sentinel.
fn cost_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        clip_ratio(num / den)
    } else {
        RATIO_CLIP
    }
}

/// `num / den` clipped, with zero for an empty denominator (rates and means).
fn rate(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        clip_ratio(num / den)
    } else {
        0.0
    }
}

/// The bidding view. Built from pre-correction accounting only; nothing in
/// here depends on applied corrections.
pub fn bid_view_features(
    ledger: &Ledger,
    batch: &BatchSummary,
    prev_bid_action: f64,
    scale: &FeatureScale,
) -> StateView {
    let horizon = scale.horizon as f64;
    let t = (ledger.t as f64).min(horizon);
    let b = scale.budget;
    let last = ledger.history.last().copied().unwrap_or_default();
    let recent = &ledger.history[ledger.history.len().saturating_sub(3)..];
    let recent_value: f64 = recent.iter().map(|r| r.value).sum();
    let recent_precost: f64 = recent.iter().map(|r| r.precost).sum();
    let mean_cost_per_win = if last.wins > 0 {
        last.precost / last.wins as f64
    } else {
        0.0
    };

    let features = vec![
        t / horizon,
        (horizon - t) / horizon,
        clip_ratio(last.precost / b),
        clip_ratio(ledger.cum_value / b),
        clip_ratio(ledger.cum_precost / b),
        cost_ratio(ledger.cum_precost, ledger.cum_value),
        rate(last.wins as f64, last.impressions as f64),
        rate(mean_cost_per_win, scale.per_step_budget()),
        clip_ratio(recent_value / b),
        clip_ratio(recent_precost / b),
        rate(batch.mean_value(), scale.per_step_budget()),
        rate(batch.count as f64, scale.mean_batch_size),
        prev_bid_action,
        1.0,
    ];
    debug_assert_eq!(features.len(), BID_FEATURES);
    StateView {
        kind: ViewKind::Bid,
        features,
    }
}

/// The pricing view: the bidding view plus the post-correction quantities it
/// masks.
pub fn price_view_features(
    ledger: &Ledger,
    batch: &BatchSummary,
    prev: Action,
    scale: &FeatureScale,
) -> StateView {
    let mut features = bid_view_features(ledger, batch, prev.bid_multiplier, scale).features;
    let b = scale.budget;
    features.push(clip_ratio(compute_bal(ledger) / b));
    let correction = ledger.cum_correction / b;
    features.push(if correction.is_finite() {
        correction.clamp(-RATIO_CLIP, RATIO_CLIP)
    } else {
        0.0
    });
    features.push(cost_ratio(ledger.cum_payment(), ledger.cum_value));
    debug_assert_eq!(features.len(), PRICE_FEATURES);
    StateView {
        kind: ViewKind::Price,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scale() -> FeatureScale {
        FeatureScale {
            budget: 100.0,
            horizon: 10,
            mean_batch_size: 4.0,
        }
    }

    fn ledger_from(records: &[StepRecord]) -> Ledger {
        records
            .iter()
            .fold(Ledger::new(100.0), |l, r| l.advanced(*r))
    }

    fn rec(value: f64, precost: f64, correction: f64) -> StepRecord {
        StepRecord {
            value,
            precost,
            correction,
            wins: 1,
            impressions: 2,
        }
    }

    #[test]
    fn bal_examples() {
        assert_eq!(compute_bal(&ledger_from(&[rec(6.0, 8.0, -1.0)])), 1.0);
        assert_eq!(compute_bal(&ledger_from(&[rec(9.0, 5.0, 0.0)])), 0.0);
        assert_eq!(compute_bal(&Ledger::new(10.0)), 0.0);
    }

    #[test]
    fn settle_examples() {
        assert_eq!(settle_payment(3.0, 0.0), 3.0);
        assert_eq!(settle_payment(3.0, -5.0), 0.0);
        assert_eq!(settle_payment(3.0, 1.5), 4.5);
    }

    #[test]
    fn bid_view_initial_and_terminal() {
        let s = scale();
        let v = bid_view_features(&Ledger::new(100.0), &BatchSummary::default(), 1.0, &s);
        assert_eq!(v.features.len(), BID_FEATURES);
        assert_eq!(v.features[0], 0.0);
        assert_eq!(v.features[2], 0.0);
        assert_eq!(v.features[3], 0.0);
        assert_eq!(v.features[4], 0.0);
        assert_eq!(v.features[13], 1.0);
        // no value yet: cost ratio takes the sentinel
        assert_eq!(v.features[5], RATIO_CLIP);

        let full = ledger_from(&[rec(1.0, 1.0, 0.0); 10]);
        let v = bid_view_features(&full, &BatchSummary::default(), 1.0, &s);
        assert_eq!(v.features[0], 1.0);
        assert_eq!(v.features[1], 0.0);
    }

    #[test]
    fn price_view_examples() {
        let s = scale();
        let l = ledger_from(&[rec(5.0, 4.0, 0.0), rec(3.0, 2.0, 0.0)]);
        let pv = price_view_features(&l, &BatchSummary::default(), Action::default(), &s);
        assert_eq!(pv.features.len(), PRICE_FEATURES);
        assert_eq!(pv.features[14], 0.0);
        assert_eq!(pv.features[15], 0.0);
        assert_eq!(pv.features[16], pv.features[5]);

        // bal = 10 = 0.1 * B
        let l = ledger_from(&[rec(20.0, 30.0, 0.0)]);
        let pv = price_view_features(&l, &BatchSummary::default(), Action::default(), &s);
        assert!((pv.features[14] - 0.1).abs() < 1e-12);

        // the deficit is then refunded exactly
        let l = l.advanced(rec(0.0, 0.0, -10.0));
        let pv = price_view_features(&l, &BatchSummary::default(), Action::default(), &s);
        assert_eq!(pv.features[14], 0.0);
        assert!((pv.features[15] + 0.1).abs() < 1e-12);
    }

    fn arb_record() -> impl Strategy<Value = StepRecord> {
        (0.0..5.0f64, 0.0..5.0f64, -3.0..3.0f64, 0usize..5, 0usize..8).prop_map(
            |(value, precost, correction, wins, extra)| StepRecord {
                value,
                precost,
                correction: correction.max(-precost),
                wins,
                impressions: wins + extra,
            },
        )
    }

    proptest! {
        #[test]
        fn settle_is_monotone_and_non_negative(c in 0.0..100.0f64, y in -100.0..100.0f64, dc in 0.0..10.0f64, dy in 0.0..10.0f64) {
            let p = settle_payment(c, y);
            prop_assert!(p >= 0.0);
            prop_assert!(settle_payment(c + dc, y) >= p);
            prop_assert!(settle_payment(c, y + dy) >= p);
        }

        #[test]
        fn bal_zero_when_never_overspent(steps in proptest::collection::vec((0.0..5.0f64, 0.0..1.0f64), 0..20)) {
            // post-correction cost at most value at every step keeps the
            // cumulative deficit at zero
            let l = steps.iter().fold(Ledger::new(100.0), |l, (v, frac)| l.advanced(StepRecord {
                value: *v, precost: v * frac, correction: 0.0, wins: 1, impressions: 1,
            }));
            prop_assert_eq!(compute_bal(&l), 0.0);
        }

        #[test]
        fn bid_view_ignores_corrections(
            records in proptest::collection::vec(arb_record(), 0..12),
            perturb in proptest::collection::vec(-2.0..2.0f64, 12),
            count in 0usize..10, total in 0.0..20.0f64, prev in 0.0..3.0f64,
        ) {
            let s = scale();
            let batch = BatchSummary { count, total_value: total };
            let a = records.iter().fold(Ledger::new(100.0), |l, r| l.advanced(*r));
            let b = records.iter().zip(&perturb).fold(Ledger::new(100.0), |l, (r, p)| {
                l.advanced(StepRecord { correction: r.correction + p, ..*r })
            });
            let fa = bid_view_features(&a, &batch, prev, &s).features;
            let fb = bid_view_features(&b, &batch, prev, &s).features;
            prop_assert_eq!(
                fa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                fb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn features_always_finite(records in proptest::collection::vec(arb_record(), 0..12), count in 0usize..3, total in 0.0..2.0f64) {
            let s = scale();
            let l = records.iter().fold(Ledger::new(100.0), |l, r| l.advanced(*r));
            let batch = BatchSummary { count, total_value: total };
            let pv = price_view_features(&l, &batch, Action { bid_multiplier: 1.0, price_offset: -0.1 }, &s);
            prop_assert!(pv.features.iter().all(|x| x.is_finite()));
            prop_assert!(pv.features[5] >= 0.0 && pv.features[5] <= RATIO_CLIP);
            prop_assert!(pv.features[16] >= 0.0 && pv.features[16] <= RATIO_CLIP);
        }
    }
}
