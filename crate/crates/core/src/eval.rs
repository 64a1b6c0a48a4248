//! Seeded rollout evaluation, reports and the ablation comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction_env::{run_episode, run_joint_episode, EnvConfig, JointPolicy, NoPricing, Observation};
use crate::autodiff::Mat;
use crate::checkpoint::Checkpoint;
use crate::controllers::{ControllerConfig, PidBidPolicy, PidPricingPolicy};
use crate::domain::{Action, StateView};
use crate::error::{Error, Result};
use crate::model::{Model, Window};
use crate::rtg::{cpa_report, rtg_bid_memoryless, score, EpisodeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluation episodes use seeds `seed_base + i`.
    pub seed_base: u64,
    pub episodes: usize,
    /// Bidding return target before scaling; unset means the largest episode
    /// return seen in training.
    pub rtg_b_target: Option<f64>,
    pub rtg_p_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed_base: 1_000_000,
            episodes: 5,
            rtg_b_target: None,
            rtg_p_target: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.episodes as u64).map(|i| self.seed_base + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be positive"));
        }
        if let Some(t) = self.rtg_b_target {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::config("eval.rtg_b_target", "must be non-negative and finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.rtg_p_target) {
            return Err(Error::config("eval.rtg_p_target", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// What to evaluate.
#[derive(Debug, Clone)]
pub enum PolicyKind {
    /// Base PID bidder, no pricing.
    Pid,
    /// Base PID bidder with the PID pricing controller.
    PidJoint,
    ZeroBid,
    Model(Box<Checkpoint>),
}

#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub label: String,
    pub kind: PolicyKind,
}

impl PolicySpec {
    pub fn new(label: impl Into<String>, kind: PolicyKind) -> Self {
        Self {
            label: label.into(),
            kind,
        }
    }
}

/// A trained model acting with constant return targets over a sliding
/// window of its own history.
pub struct ModelPolicy<'m> {
    model: &'m Model,
    rtg_b: f64,
    rtg_p: f64,
    history: Vec<(usize, Vec<f64>, Vec<f64>, Action)>,
}

impl<'m> ModelPolicy<'m> {
    /// `rtg_b` is already scaled.
    pub fn new(model: &'m Model, rtg_b: f64, rtg_p: f64) -> Self {
        Self {
            model,
            rtg_b,
            rtg_p,
            history: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &'m Checkpoint, cfg: &EvalConfig) -> Self {
        let target = cfg.rtg_b_target.unwrap_or(ckpt.meta.max_episode_return);
        Self::new(&ckpt.model, target / ckpt.meta.rtg_scale, cfg.rtg_p_target)
    }

    fn window(&self) -> Window {
        let start = self.history.len().saturating_sub(self.model.config.context);
        let steps = &self.history[start..];
        let n = steps.len();
        let flat = |f: fn(&(usize, Vec<f64>, Vec<f64>, Action)) -> &Vec<f64>| {
            let cols = f(&steps[0]).len();
            Mat::from_vec(n, cols, steps.iter().flat_map(|s| f(s).iter().copied()).collect())
        };
        Window {
            timesteps: steps.iter().map(|s| s.0).collect(),
            rtg_b: vec![self.rtg_b; n],
            rtg_p: vec![self.rtg_p; n],
            s_bid: flat(|s| &s.1),
            s_price: flat(|s| &s.2),
            a_b: steps.iter().map(|s| s.3.bid_multiplier).collect(),
            a_p: steps.iter().map(|s| s.3.price_offset).collect(),
        }
    }
}

impl JointPolicy for ModelPolicy<'_> {
    fn act(&mut self, obs: &Observation<'_>) -> Action {
        if let Some(last) = self.history.last_mut() {
            last.3 = obs.prev_action;
        }
        let view = |v: &StateView| v.features.clone();
        self.history
            .push((obs.ledger.t, view(&obs.bid_view), view(&obs.price_view), Action::default()));
        match self.model.forward_joint(&self.window()) {
            Ok((bid_multiplier, price_offset)) => Action {
                bid_multiplier,
                price_offset,
            },
            Err(_) => Action {
                bid_multiplier: f64::NAN,
                price_offset: f64::NAN,
            },
        }
    }
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub seed: u64,
    pub score_precost: f64,
    pub score_payment: f64,
    pub tcpa_cpa: f64,
    pub achieved: bool,
    pub budget_spent: f64,
    pub wins: usize,
    pub value: f64,
    pub precost: f64,
    pub payment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub episodes: usize,
    pub score_precost_mean: f64,
    pub score_precost_std: f64,
    pub score_payment_mean: f64,
    pub score_payment_std: f64,
    pub tcpa_cpa_mean: f64,
    pub tcpa_cpa_std: f64,
    pub achieved_rate: f64,
    pub budget_spent_mean: f64,
    pub wins_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<PolicySummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    if !mean.is_finite() {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates rows per policy, in order of first appearance. Standard
/// deviations use the n - 1 denominator.
pub fn summarize(rows: &[EvalRow]) -> Vec<PolicySummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.policy.as_str()) {
            labels.push(&r.policy);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let rs: Vec<&EvalRow> = rows.iter().filter(|r| r.policy == label).collect();
            let col = |f: fn(&EvalRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (sp, sp_sd) = col(|r| r.score_precost);
            let (sy, sy_sd) = col(|r| r.score_payment);
            let (ratio, ratio_sd) = col(|r| r.tcpa_cpa);
            PolicySummary {
                policy: label.to_string(),
                episodes: rs.len(),
                score_precost_mean: sp,
                score_precost_std: sp_sd,
                score_payment_mean: sy,
                score_payment_std: sy_sd,
                tcpa_cpa_mean: ratio,
                tcpa_cpa_std: ratio_sd,
                achieved_rate: col(|r| if r.achieved { 1.0 } else { 0.0 }).0,
                budget_spent_mean: col(|r| r.budget_spent).0,
                wins_mean: col(|r| r.wins as f64).0,
            }
        })
        .collect()
}

struct ZeroBidPolicy;

impl JointPolicy for ZeroBidPolicy {
    fn act(&mut self, _obs: &Observation<'_>) -> Action {
        Action::default()
    }
}

/// Runs one episode of `spec` on `seed` and scores it.
pub fn evaluate_episode(
    spec: &PolicySpec,
    env: &EnvConfig,
    controllers: &ControllerConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalRow> {
    let log = match &spec.kind {
        PolicyKind::Pid => run_episode(PidBidPolicy::new(controllers, env.a_max), NoPricing, env, seed)?,
        PolicyKind::PidJoint => run_episode(
            PidBidPolicy::new(controllers, env.a_max),
            PidPricingPolicy::new(controllers, env.p_max, env.budget),
            env,
            seed,
        )?,
        PolicyKind::ZeroBid => run_joint_episode(&mut ZeroBidPolicy, env, seed)?,
        PolicyKind::Model(ckpt) => run_joint_episode(&mut ModelPolicy::from_checkpoint(ckpt, cfg), env, seed)?,
    };
    let series = EpisodeSeries::from_history(&log.final_ledger.history);
    let payments = series.payments();
    let score_precost = score(&series.values, &series.precosts);
    debug_assert_eq!(score_precost, rtg_bid_memoryless(&series, 0));
    let cpa = cpa_report(&series.values, &payments);
    Ok(EvalRow {
        policy: spec.label.clone(),
        seed,
        score_precost,
        score_payment: score(&series.values, &payments),
        tcpa_cpa: cpa.ratio,
        achieved: cpa.achieved,
        budget_spent: log.final_ledger.budget_spent,
        wins: log.final_ledger.wins_total,
        value: series.values.iter().sum(),
        precost: series.precosts.iter().sum(),
        payment: payments.iter().sum(),
    })
}

/// Evaluates every policy on every seed. Rows are ordered by policy, then
/// seed, whatever the scheduling.
pub fn evaluate(
    specs: &[PolicySpec],
    env: &EnvConfig,
    controllers: &ControllerConfig,
    cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("evaluation seeds".into()));
    }
    env.validate()?;
    cfg.validate()?;
    let jobs: Vec<(&PolicySpec, u64)> = specs.iter().flat_map(|s| seeds.iter().map(move |&x| (s, x))).collect();
    let rows = jobs
        .par_iter()
        .map(|(s, seed)| evaluate_episode(s, env, controllers, cfg, *seed))
        .collect::<Result<Vec<_>>>()?;
    let summaries = summarize(&rows);
    Ok(EvalReport { rows, summaries })
}

/// Directional comparisons between ablation variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Stage-1 model scores at least the PID baseline.
    pub stage1_ge_pid: bool,
    /// Preference-tuned model scores at least the stage-1 model.
    pub full_ge_stage1: bool,
    /// History-aware variant's TCPA/CPA is strictly closer to 1.
    pub his_rtg_ratio_closer: bool,
    /// Memoryless variant scores strictly higher than the history-aware one.
    pub memoryless_score_higher: bool,
    /// Stage-1 model with GCA scores at least the one without.
    pub gca_ge_no_gca: bool,
}

#[derive(Debug, Clone)]
pub struct AblationCheckpoints {
    pub full: Checkpoint,
    pub stage1: Checkpoint,
    pub his_rtg: Checkpoint,
    pub no_gca: Checkpoint,
}

pub const ABLATION_LABELS: [&str; 5] = ["pid", "stage1", "full", "his_rtg", "no_gca"];

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub report: EvalReport,
    pub flags: AblationFlags,
}

pub fn ablation_flags(summaries: &[PolicySummary]) -> Result<AblationFlags> {
    let get = |label: &str| {
        summaries
            .iter()
            .find(|s| s.policy == label)
            .ok_or_else(|| Error::Empty(format!("no summary for `{label}`")))
    };
    let (pid, stage1, full, his, no_gca) = (get("pid")?, get("stage1")?, get("full")?, get("his_rtg")?, get("no_gca")?);
    Ok(AblationFlags {
        stage1_ge_pid: stage1.score_precost_mean >= pid.score_precost_mean,
        full_ge_stage1: full.score_precost_mean >= stage1.score_precost_mean,
        his_rtg_ratio_closer: (his.tcpa_cpa_mean - 1.0).abs() < (stage1.tcpa_cpa_mean - 1.0).abs(),
        memoryless_score_higher: stage1.score_precost_mean > his.score_precost_mean,
        gca_ge_no_gca: stage1.score_precost_mean >= no_gca.score_precost_mean,
    })
}

pub fn ablation_suite(
    env: &EnvConfig,
    controllers: &ControllerConfig,
    cfg: &EvalConfig,
    seeds: &[u64],
    ckpts: &AblationCheckpoints,
) -> Result<AblationResult> {
    let specs = [
        PolicySpec::new("pid", PolicyKind::Pid),
        PolicySpec::new("stage1", PolicyKind::Model(Box::new(ckpts.stage1.clone()))),
        PolicySpec::new("full", PolicyKind::Model(Box::new(ckpts.full.clone()))),
        PolicySpec::new("his_rtg", PolicyKind::Model(Box::new(ckpts.his_rtg.clone()))),
        PolicySpec::new("no_gca", PolicyKind::Model(Box::new(ckpts.no_gca.clone()))),
    ];
    let report = evaluate(&specs, env, controllers, cfg, seeds)?;
    let flags = ablation_flags(&report.summaries)?;
    Ok(AblationResult { report, flags })
}

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ABLATION_FILE: &str = "ablation.txt";

fn write_csv<T: Serialize>(path: &Path, header: &[&str], items: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for item in items {
        w.serialize(item).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const ROW_COLUMNS: [&str; 11] = [
    "policy",
    "seed",
    "score_precost",
    "score_payment",
    "tcpa_cpa",
    "achieved",
    "budget_spent",
    "wins",
    "value",
    "precost",
    "payment",
];

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "policy",
    "episodes",
    "score_precost_mean",
    "score_precost_std",
    "score_payment_mean",
    "score_payment_std",
    "tcpa_cpa_mean",
    "tcpa_cpa_std",
    "achieved_rate",
    "budget_spent_mean",
    "wins_mean",
];

/// Plain-text side-by-side table, one line per policy.
pub fn ablation_table(summaries: &[PolicySummary], flags: Option<&AblationFlags>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>12} {:>10} {:>12} {:>10} {:>9}",
        "policy", "episodes", "score", "score_sd", "tcpa_cpa", "ratio_sd", "achieved"
    );
    for p in summaries {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>12.4} {:>10.4} {:>12.4} {:>10.4} {:>9.2}",
            p.policy,
            p.episodes,
            p.score_precost_mean,
            p.score_precost_std,
            p.tcpa_cpa_mean,
            p.tcpa_cpa_std,
            p.achieved_rate
        );
    }
    if let Some(f) = flags {
        let _ = writeln!(s);
        for (name, v) in [
            ("stage1_ge_pid", f.stage1_ge_pid),
            ("full_ge_stage1", f.full_ge_stage1),
            ("his_rtg_ratio_closer", f.his_rtg_ratio_closer),
            ("memoryless_score_higher", f.memoryless_score_higher),
            ("gca_ge_no_gca", f.gca_ge_no_gca),
        ] {
            let _ = writeln!(s, "{name}: {v}");
        }
    }
    s
}

pub fn write_report(report: &EvalReport, flags: Option<&AblationFlags>, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_csv(&out_dir.join(ROWS_FILE), &ROW_COLUMNS, &report.rows)?;
    write_csv(&out_dir.join(SUMMARY_FILE), &SUMMARY_COLUMNS, &report.summaries)?;
    let path = out_dir.join(ABLATION_FILE);
    fs::write(&path, ablation_table(&report.summaries, flags)).map_err(|e| Error::io(&path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
