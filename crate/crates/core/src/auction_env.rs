//! Seeded second-price auction environment.
//!
//! Each step draws a batch of impressions whose size, values and competing
//! prices depend only on `(seed, step)`. Actions therefore never change the
//! traffic an episode sees, which is what makes counterfactual rollouts
//! comparable (common random numbers).

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{
    bid_view_features, price_view_features, settle_payment, Action, ActionBounds, BatchSummary,
    FeatureScale, Impression, ImpressionBatch, Ledger, StateView, StepRecord,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Decision steps per episode.
    pub horizon: usize,
    /// Mean impressions per step before the diurnal multiplier.
    pub mean_batch_size: f64,
    /// Log-scale mean of the raw (unscaled) impression value.
    pub value_log_mean: f64,
    /// Log-scale standard deviation of the raw impression value.
    pub value_log_sigma: f64,
    /// Competitor price is `competitiveness * value * exp(competitor_sigma * z)`.
    pub competitiveness: f64,
    pub competitor_sigma: f64,
    /// Amplitude of the sinusoidal traffic multiplier, in `[0, 1)`.
    pub diurnal_amplitude: f64,
    pub budget: f64,
    /// Target cost per unit of raw value; raw values are multiplied by it.
    pub tcpa: f64,
    pub a_max: f64,
    pub p_max: f64,
    pub seed: u64,
    /// Number of leading steps that use `shock_competitiveness` instead.
    pub shock_steps: usize,
    pub shock_competitiveness: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 48,
            mean_batch_size: 40.0,
            // mean raw value 0.02; scaled by tcpa = 50 this is 1.0 per impression
            value_log_mean: (0.02f64).ln() - 0.5 * 0.5 * 0.5,
            value_log_sigma: 0.5,
            competitiveness: 1.0,
            competitor_sigma: 0.4,
            diurnal_amplitude: 0.3,
            budget: 5000.0,
            tcpa: 50.0,
            a_max: 4.0,
            p_max: 0.5,
            seed: 0,
            shock_steps: 0,
            shock_competitiveness: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("env.{key}"), msg))
            }
        };
        check(self.horizon >= 1, "horizon", "must be >= 1")?;
        check(
            self.mean_batch_size > 0.0 && self.mean_batch_size.is_finite(),
            "mean_batch_size",
            "must be finite and > 0",
        )?;
        check(self.value_log_mean.is_finite(), "value_log_mean", "must be finite")?;
        check(
            self.value_log_sigma >= 0.0 && self.value_log_sigma.is_finite(),
            "value_log_sigma",
            "must be finite and >= 0",
        )?;
        check(
            self.competitiveness > 0.0 && self.competitiveness.is_finite(),
            "competitiveness",
            "must be finite and > 0",
        )?;
        check(
            self.competitor_sigma >= 0.0 && self.competitor_sigma.is_finite(),
            "competitor_sigma",
            "must be finite and >= 0",
        )?;
        check(
            (0.0..1.0).contains(&self.diurnal_amplitude),
            "diurnal_amplitude",
            "must lie in [0, 1)",
        )?;
        check(
            self.budget > 0.0 && self.budget.is_finite(),
            "budget",
            "must be finite and > 0",
        )?;
        check(self.tcpa > 0.0 && self.tcpa.is_finite(), "tcpa", "must be finite and > 0")?;
        check(self.a_max > 0.0 && self.a_max.is_finite(), "a_max", "must be finite and > 0")?;
        check(self.p_max >= 0.0 && self.p_max.is_finite(), "p_max", "must be finite and >= 0")?;
        check(
            self.shock_competitiveness > 0.0 && self.shock_competitiveness.is_finite(),
            "shock_competitiveness",
            "must be finite and > 0",
        )?;
        Ok(())
    }

    pub fn bounds(&self) -> ActionBounds {
        ActionBounds {
            a_max: self.a_max,
            p_max: self.p_max,
        }
    }

    pub fn feature_scale(&self) -> FeatureScale {
        FeatureScale {
            budget: self.budget,
            horizon: self.horizon,
            mean_batch_size: self.mean_batch_size,
        }
    }

    fn diurnal(&self, step: usize) -> f64 {
        1.0 + self.diurnal_amplitude * (2.0 * PI * step as f64 / self.horizon as f64).sin()
    }

    fn competitiveness_at(&self, step: usize) -> f64 {
        if step < self.shock_steps {
            self.shock_competitiveness
        } else {
            self.competitiveness
        }
    }
}

/// Draws the impressions of `step` for episode `seed`.
pub fn sample_batch(seed: u64, step: usize, config: &EnvConfig) -> ImpressionBatch {
    let mut rng = rng::batch_stream(seed, step);
    let rate = config.mean_batch_size * config.diurnal(step);
    let count = if rate > 0.0 {
        Poisson::new(rate)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0)
    } else {
        0
    };
    let values = LogNormal::new(config.value_log_mean, config.value_log_sigma)
        .expect("validated log-normal parameters");
    let noise = Normal::new(0.0, 1.0).expect("standard normal");
    let kappa = config.competitiveness_at(step);
    let impressions = (0..count)
        .map(|_| {
            let value = values.sample(&mut rng) * config.tcpa;
            let z: f64 = noise.sample(&mut rng);
            let competitor_price = if config.competitor_sigma == 0.0 {
                kappa * value
            } else {
                kappa * value * (config.competitor_sigma * z).exp()
            };
            Impression {
                value,
                competitor_price,
            }
        })
        .collect();
    ImpressionBatch { step, impressions }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuctionResult {
    pub won: bool,
    pub precost: f64,
}

/// Second-price auction per impression. Ties lose.
pub fn run_auction(batch: &ImpressionBatch, bid_multiplier: f64) -> Vec<AuctionResult> {
    batch
        .impressions
        .iter()
        .map(|imp| {
            let won = bid_multiplier * imp.value > imp.competitor_price;
            AuctionResult {
                won,
                precost: if won { imp.competitor_price } else { 0.0 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub wins: usize,
    pub step_value: f64,
    pub step_precost: f64,
    pub step_payment: f64,
    /// Offset per won impression as requested by the pricing action.
    pub applied_offset: f64,
}

/// Environment state between steps. Cloning it yields an independent
/// snapshot that replays the same traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub seed: u64,
    pub ledger: Ledger,
    pub budget_exhausted: bool,
    batch: ImpressionBatch,
}

impl EnvState {
    pub fn reset(config: &EnvConfig, seed: u64) -> Self {
        Self {
            config: config.clone(),
            seed,
            ledger: Ledger::new(config.budget),
            budget_exhausted: false,
            batch: sample_batch(seed, 0, config),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.budget_exhausted || self.ledger.t >= self.config.horizon
    }

    pub fn step_index(&self) -> usize {
        self.ledger.t
    }

    pub fn remaining_steps(&self) -> usize {
        self.config.horizon.saturating_sub(self.ledger.t)
    }

    /// Impressions about to be auctioned at the current step.
    pub fn batch(&self) -> &ImpressionBatch {
        &self.batch
    }

    pub fn batch_summary(&self) -> BatchSummary {
        self.batch.summary()
    }
}

/// Runs one step: auctions, settlement with the pricing offset, ledger
/// update. Impressions that would push spend over budget end the step and
/// the episode.
pub fn env_step(state: &EnvState, bid_multiplier: f64, price_offset: f64) -> Result<(EnvState, StepOutcome)> {
    if state.is_terminal() {
        return Err(Error::Usage(format!(
            "env_step called on a terminal state (t = {}, exhausted = {})",
            state.ledger.t, state.budget_exhausted
        )));
    }
    if !bid_multiplier.is_finite() || !price_offset.is_finite() {
        return Err(Error::NonFinite(format!(
            "action ({bid_multiplier}, {price_offset}) at step {}",
            state.ledger.t
        )));
    }
    let action = Action {
        bid_multiplier,
        price_offset,
    };
    if !state.config.bounds().contains(action) {
        return Err(Error::Usage(format!(
            "action ({bid_multiplier}, {price_offset}) outside bounds {:?}",
            state.config.bounds()
        )));
    }

    let results = run_auction(&state.batch, bid_multiplier);
    let mut outcome = StepOutcome {
        applied_offset: price_offset,
        ..Default::default()
    };
    let mut exhausted = false;
    let mut available = state.ledger.remaining_budget();
    for (imp, res) in state.batch.impressions.iter().zip(&results) {
        if !res.won {
            continue;
        }
        let payment = settle_payment(res.precost, price_offset);
        if payment > available {
            exhausted = true;
            break;
        }
        available -= payment;
        outcome.wins += 1;
        outcome.step_value += imp.value;
        outcome.step_precost += res.precost;
        outcome.step_payment += payment;
    }

    let record = StepRecord {
        value: outcome.step_value,
        precost: outcome.step_precost,
        correction: outcome.step_payment - outcome.step_precost,
        wins: outcome.wins,
        impressions: state.batch.impressions.len(),
    };
    let ledger = state.ledger.advanced(record);
    let next_step = ledger.t;
    let batch = if next_step < state.config.horizon && !exhausted {
        sample_batch(state.seed, next_step, &state.config)
    } else {
        ImpressionBatch {
            step: next_step,
            impressions: Vec::new(),
        }
    };
    Ok((
        EnvState {
            config: state.config.clone(),
            seed: state.seed,
            ledger,
            budget_exhausted: exhausted,
            batch,
        },
        outcome,
    ))
}

/// Everything a policy may look at before acting.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub ledger: &'a Ledger,
    pub batch: BatchSummary,
    pub bid_view: StateView,
    pub price_view: StateView,
    pub prev_action: Action,
    pub remaining_steps: usize,
}

impl<'a> Observation<'a> {
    pub fn new(state: &'a EnvState, prev_action: Action) -> Self {
        let scale = state.config.feature_scale();
        let batch = state.batch_summary();
        Self {
            ledger: &state.ledger,
            batch,
            bid_view: bid_view_features(&state.ledger, &batch, prev_action.bid_multiplier, &scale),
            price_view: price_view_features(&state.ledger, &batch, prev_action, &scale),
            prev_action,
            remaining_steps: state.remaining_steps(),
        }
    }
}

/// A bidding policy sees only the masked bidding view.
pub trait BidPolicy {
    fn bid(&mut self, view: &StateView) -> f64;
}

/// A pricing policy sees the full observation and the bid chosen this step.
pub trait PricingPolicy {
    fn price(&mut self, obs: &Observation<'_>, bid_multiplier: f64) -> f64;
}

pub trait JointPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Action;
}

/// Joint policy assembled from separate bidding and pricing policies.
pub struct SplitPolicy<B, P> {
    pub bid: B,
    pub pricing: P,
}

impl<B: BidPolicy, P: PricingPolicy> JointPolicy for SplitPolicy<B, P> {
    fn act(&mut self, obs: &Observation<'_>) -> Action {
        let bid_multiplier = self.bid.bid(&obs.bid_view);
        let price_offset = self.pricing.price(obs, bid_multiplier);
        Action {
            bid_multiplier,
            price_offset,
        }
    }
}

/// Pricing policy that never corrects.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPricing;

impl PricingPolicy for NoPricing {
    fn price(&mut self, _obs: &Observation<'_>, _bid: f64) -> f64 {
        0.0
    }
}

/// Cumulative ledger totals after a step (the per-step history is implied by
/// the preceding lines of the log).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub cum_value: f64,
    pub cum_precost: f64,
    pub cum_correction: f64,
    pub budget_spent: f64,
    pub wins_total: usize,
}

impl From<&Ledger> for LedgerTotals {
    fn from(l: &Ledger) -> Self {
        Self {
            cum_value: l.cum_value,
            cum_precost: l.cum_precost,
            cum_correction: l.cum_correction,
            budget_spent: l.budget_spent,
            wins_total: l.wins_total,
        }
    }
}

/// One line of an episode log. Field order on disk is the declaration order:
/// `seed, t, impressions, action, outcome, totals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub seed: u64,
    pub t: usize,
    pub impressions: usize,
    pub action: Action,
    pub outcome: StepOutcome,
    pub totals: LedgerTotals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub final_ledger: Ledger,
    pub budget_exhausted: bool,
}

impl EpisodeLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses the step lines back. The ledger history is rebuilt from the
    /// per-step outcomes.
    pub fn read_jsonl<R: BufRead>(input: R, path: &Path, budget: f64) -> Result<Self> {
        let mut steps = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let step: StepLog = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            steps.push(step);
        }
        let seed = steps.first().map(|s| s.seed).unwrap_or_default();
        let mut ledger = Ledger::new(budget);
        for s in &steps {
            ledger.push(StepRecord {
                value: s.outcome.step_value,
                precost: s.outcome.step_precost,
                correction: s.outcome.step_payment - s.outcome.step_precost,
                wins: s.outcome.wins,
                impressions: s.impressions,
            });
        }
        Ok(Self {
            seed,
            steps,
            budget_exhausted: false,
            final_ledger: ledger,
        })
    }
}

/// Rolls an episode with separate bidding and pricing policies.
pub fn run_episode<B: BidPolicy, P: PricingPolicy>(
    bid_policy: B,
    pricing_policy: P,
    config: &EnvConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    let mut policy = SplitPolicy {
        bid: bid_policy,
        pricing: pricing_policy,
    };
    run_joint_episode(&mut policy, config, seed)
}

pub fn run_joint_episode<P: JointPolicy + ?Sized>(
    policy: &mut P,
    config: &EnvConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    config.validate()?;
    let bounds = config.bounds();
    let mut state = EnvState::reset(config, seed);
    let mut prev = Action::default();
    let mut steps = Vec::with_capacity(config.horizon);
    while !state.is_terminal() {
        let action = {
            let obs = Observation::new(&state, prev);
            policy.act(&obs)
        };
        if !action.bid_multiplier.is_finite() || !action.price_offset.is_finite() {
            return Err(Error::NonFinite(format!(
                "policy produced ({}, {}) at step {} of seed {seed}",
                action.bid_multiplier, action.price_offset, state.ledger.t
            )));
        }
        let action = bounds.clamp(action);
        let impressions = state.batch().impressions.len();
        let t = state.ledger.t;
        let (next, outcome) = env_step(&state, action.bid_multiplier, action.price_offset)?;
        steps.push(StepLog {
            seed,
            t,
            impressions,
            action,
            outcome,
            totals: LedgerTotals::from(&next.ledger),
        });
        prev = action;
        state = next;
    }
    Ok(EpisodeLog {
        seed,
        steps,
        budget_exhausted: state.budget_exhausted,
        final_ledger: state.ledger,
    })
}
