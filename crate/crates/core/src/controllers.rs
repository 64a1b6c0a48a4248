//! PID controllers: the bid-only base policy used to collect data, and the
//! pricing controller that generates correction actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::auction_env::{BidPolicy, Observation, PricingPolicy};
use crate::domain::StateView;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub out_lo: f64,
    pub out_hi: f64,
    /// Symmetric clamp on the accumulated error.
    pub integral_clamp: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 0.1,
            kd: 0.0,
            out_lo: -1.0,
            out_hi: 1.0,
            integral_clamp: 5.0,
        }
    }
}

impl PidConfig {
    pub fn zero_gains(self) -> Self {
        Self {
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            ..self
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (k, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !v.is_finite() {
                return Err(Error::config(format!("{prefix}.{k}"), "must be finite"));
            }
        }
        if !(self.out_lo.is_finite() && self.out_hi.is_finite() && self.out_lo <= self.out_hi) {
            return Err(Error::config(
                format!("{prefix}.out_lo"),
                "output clamp must be finite with out_lo <= out_hi",
            ));
        }
        if !(self.integral_clamp >= 0.0 && self.integral_clamp.is_finite()) {
            return Err(Error::config(
                format!("{prefix}.integral_clamp"),
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub config: PidConfig,
}

impl PidState {
    pub fn new(config: PidConfig) -> Self {
        Self {
            integral: 0.0,
            prev_error: 0.0,
            config,
        }
    }

    /// One controller update. Returns the clamped control and the next state.
    pub fn step(&self, error: f64) -> (f64, PidState) {
        let c = &self.config;
        let integral = (self.integral + error).clamp(-c.integral_clamp, c.integral_clamp);
        let raw = c.kp * error + c.ki * integral + c.kd * (error - self.prev_error);
        let control = raw.clamp(c.out_lo, c.out_hi);
        (
            control,
            PidState {
                integral,
                prev_error: error,
                config: self.config,
            },
        )
    }
}

pub fn pid_step(state: &PidState, error: f64) -> (f64, PidState) {
    state.step(error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Neutral bid multiplier of the base policy.
    pub a_ref: f64,
    /// Log-scale spread of `a_ref` during data collection; the base policy
    /// draws `a_ref * exp(U(-s, s))` once per episode.
    pub a_ref_spread: f64,
    pub bid: PidConfig,
    pub price: PidConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            a_ref: 1.0,
            a_ref_spread: 0.9,
            bid: PidConfig {
                out_lo: -0.9,
                out_hi: 1.5,
                ..PidConfig::default()
            },
            price: PidConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_ref > 0.0 && self.a_ref.is_finite()) {
            return Err(Error::config("controllers.a_ref", "must be finite and > 0"));
        }
        if !(self.a_ref_spread >= 0.0 && self.a_ref_spread.is_finite()) {
            return Err(Error::config("controllers.a_ref_spread", "must be finite and >= 0"));
        }
        self.bid.validate("controllers.bid")?;
        self.price.validate("controllers.price")
    }
}

/// Base bidding policy: a PID on the pre-correction cost-to-value gap.
///
/// `a_b = clamp(a_ref * (1 + u), 0, a_max)` with `u` the PID output on
/// `e = 1 - clip(sum c / sum v)`. It reads the masked bidding view only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidBidPolicy {
    pub a_ref: f64,
    pub a_max: f64,
    pub pid: PidState,
}

impl PidBidPolicy {
    pub fn new(cfg: &ControllerConfig, a_max: f64) -> Self {
        Self {
            a_ref: cfg.a_ref,
            a_max,
            pid: PidState::new(cfg.bid),
        }
    }

    /// The data-collection variant for one episode, with `a_ref` jittered
    /// deterministically by `seed`.
    pub fn for_episode(cfg: &ControllerConfig, a_max: f64, seed: u64) -> Self {
        let mut p = Self::new(cfg, a_max);
        if cfg.a_ref_spread > 0.0 {
            let mut r = rng::stream(seed, rng::POLICY_STREAM);
            let s = cfg.a_ref_spread;
            p.a_ref *= r.random_range(-s..=s).exp();
        }
        p
    }
}

/// Indices into the bidding view.
const CUM_VALUE: usize = 3;
const COST_RATIO: usize = 5;

impl BidPolicy for PidBidPolicy {
    fn bid(&mut self, view: &StateView) -> f64 {
        // cold start: nothing won yet, stay neutral
        if view.features[CUM_VALUE] <= 0.0 {
            return self.a_ref.clamp(0.0, self.a_max);
        }
        let error = 1.0 - view.features[COST_RATIO];
        let (u, next) = self.pid.step(error);
        self.pid = next;
        (self.a_ref * (1.0 + u)).clamp(0.0, self.a_max)
    }
}

/// Pricing controller: drives post-correction cost towards value.
///
/// `e = (sum(c + y) - sum v) / max(sum v, 1e-6 * B)`; a positive deficit
/// gives a negative (refunding) offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidPricingPolicy {
    pub p_max: f64,
    pub budget: f64,
    pub pid: PidState,
}

impl PidPricingPolicy {
    pub fn new(cfg: &ControllerConfig, p_max: f64, budget: f64) -> Self {
        Self {
            p_max,
            budget,
            pid: PidState::new(cfg.price),
        }
    }

    pub fn offset(&mut self, cum_payment: f64, cum_value: f64) -> f64 {
        if cum_value <= 0.0 {
            return 0.0;
        }
        let eps = 1e-6 * self.budget;
        let error = (cum_payment - cum_value) / cum_value.max(eps);
        let (u, next) = self.pid.step(error);
        self.pid = next;
        (-u).clamp(-self.p_max, self.p_max)
    }
}

impl PricingPolicy for PidPricingPolicy {
    fn price(&mut self, obs: &Observation<'_>, _bid: f64) -> f64 {
        self.offset(obs.ledger.cum_payment(), obs.ledger.cum_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction_env::{run_episode, EnvConfig, NoPricing};
    use crate::domain::{bid_view_features, BatchSummary, FeatureScale, Ledger, StepRecord};
    use proptest::prelude::*;

    fn gains(kp: f64, ki: f64, kd: f64) -> PidConfig {
        PidConfig {
            kp,
            ki,
            kd,
            out_lo: -10.0,
            out_hi: 10.0,
            integral_clamp: 100.0,
        }
    }

    #[test]
    fn pid_examples() {
        let s = PidState::new(PidConfig::default());
        assert_eq!(s.step(0.0).0, 0.0);

        let s = PidState::new(gains(1.0, 0.0, 0.0));
        assert_eq!(s.step(0.3).0, 0.3);

        let mut s = PidState::new(gains(0.0, 0.5, 0.0));
        let mut out = 0.0;
        for _ in 0..4 {
            let (u, n) = s.step(0.1);
            out = u;
            s = n;
        }
        assert!((out - 0.2).abs() < 1e-12);
    }

    fn view_for(value: f64, cost: f64) -> StateView {
        let scale = FeatureScale {
            budget: 1000.0,
            horizon: 48,
            mean_batch_size: 40.0,
        };
        let ledger = Ledger::new(1000.0).advanced(StepRecord {
            value,
            precost: cost,
            correction: 0.0,
            wins: 1,
            impressions: 1,
        });
        bid_view_features(&ledger, &BatchSummary::default(), 1.0, &scale)
    }

    #[test]
    fn base_bid_on_target_and_over() {
        let cfg = ControllerConfig::default();
        let mut p = PidBidPolicy::new(&cfg, 4.0);
        assert_eq!(p.bid(&view_for(10.0, 10.0)), cfg.a_ref);

        let mut p = PidBidPolicy::new(&cfg, 4.0);
        assert!(p.bid(&view_for(10.0, 20.0)) < cfg.a_ref);

        let mut p = PidBidPolicy::new(&cfg, 4.0);
        let fresh = bid_view_features(
            &Ledger::new(1000.0),
            &BatchSummary::default(),
            0.0,
            &FeatureScale {
                budget: 1000.0,
                horizon: 48,
                mean_batch_size: 40.0,
            },
        );
        assert_eq!(p.bid(&fresh), cfg.a_ref);
        assert_eq!(p.pid, PidState::new(cfg.bid));
    }

    #[test]
    fn pricing_neutral_without_deficit() {
        let cfg = ControllerConfig::default();
        let mut p = PidPricingPolicy::new(&cfg, 0.5, 1000.0);
        assert_eq!(p.offset(10.0, 10.0), 0.0);
        assert_eq!(p.offset(0.0, 0.0), 0.0);
    }

    #[test]
    fn persistent_overspend_refunds() {
        let cfg = ControllerConfig {
            price: PidConfig {
                kp: 0.5,
                ..PidConfig::default()
            },
            ..Default::default()
        };
        let mut p = PidPricingPolicy::new(&cfg, 0.5, 1000.0);
        let mut value = 0.0;
        for _ in 0..20 {
            value += 10.0;
            assert!(p.offset(1.1 * value, value) < 0.0);
        }
    }

    #[test]
    fn active_pricing_shrinks_final_gap() {
        // a bid multiplier well above one overspends; the pricing PID must
        // leave a smaller terminal gap than no pricing at all
        let env = EnvConfig::default();
        let cfg = ControllerConfig::default();
        for seed in 0..5 {
            let bid = PidBidPolicy {
                a_ref: 1.6,
                a_max: env.a_max,
                pid: PidState::new(cfg.bid.zero_gains()),
            };
            let plain = run_episode(bid, NoPricing, &env, seed).unwrap();
            let priced = run_episode(bid, PidPricingPolicy::new(&cfg, env.p_max, env.budget), &env, seed).unwrap();
            let gap = |l: &Ledger| (l.cum_payment() - l.cum_value).abs();
            assert!(gap(&plain.final_ledger) > 0.0);
            assert!(gap(&priced.final_ledger) < gap(&plain.final_ledger), "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn outputs_respect_clamps(errors in proptest::collection::vec(-1e3..1e3f64, 1..50), kp in -5.0..5.0f64, ki in -5.0..5.0f64, kd in -5.0..5.0f64) {
            let cfg = PidConfig { kp, ki, kd, out_lo: -0.7, out_hi: 1.3, integral_clamp: 2.0 };
            let mut s = PidState::new(cfg);
            for e in errors {
                let (u, n) = s.step(e);
                prop_assert!((-0.7..=1.3).contains(&u));
                prop_assert!(n.integral.abs() <= 2.0);
                s = n;
            }
        }

        #[test]
        fn anti_windup_under_saturation(e in 0.5..100.0f64, n in 1usize..200) {
            let mut s = PidState::new(PidConfig::default());
            for _ in 0..n {
                s = s.step(e).1;
            }
            prop_assert!(s.integral <= PidConfig::default().integral_clamp);
        }

        #[test]
        fn base_policy_ignores_corrections(value in 0.1..50.0f64, cost in 0.0..80.0f64, corr in -20.0..20.0f64) {
            let cfg = ControllerConfig::default();
            let scale = FeatureScale { budget: 1000.0, horizon: 48, mean_batch_size: 40.0 };
            let rec = StepRecord { value, precost: cost, correction: 0.0, wins: 2, impressions: 3 };
            let a = Ledger::new(1000.0).advanced(rec);
            let b = Ledger::new(1000.0).advanced(StepRecord { correction: corr, ..rec });
            let mut pa = PidBidPolicy::new(&cfg, 4.0);
            let mut pb = PidBidPolicy::new(&cfg, 4.0);
            let va = bid_view_features(&a, &BatchSummary::default(), 1.0, &scale);
            let vb = bid_view_features(&b, &BatchSummary::default(), 1.0, &scale);
            prop_assert_eq!(pa.bid(&va).to_bits(), pb.bid(&vb).to_bits());
        }
    }
}
