//! Joint trajectory generation and the training dataset.
//!
//! Each episode is rolled with the PID base bidder and the PID pricing
//! controller. Before every step the environment and bidder are snapshotted;
//! a second rollout from the snapshot with pricing switched off gives the
//! counterfactual pricing return, and the advantage is the difference.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction_env::{env_step, BidPolicy, EnvConfig, EnvState, Observation, PricingPolicy, StepOutcome};
use crate::controllers::{ControllerConfig, PidBidPolicy, PidPricingPolicy};
use crate::domain::Action;
use crate::error::{Error, Result};
use crate::rtg::{rtg_bid_historical, rtg_bid_memoryless, rtg_price, EpisodeSeries};

pub const STAGE1_FILE: &str = "stage1.jsonl";
pub const DPO_POOL_FILE: &str = "dpo_pool.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Minimum remaining target-scaled value for a step to enter the DPO pool.
pub const FUTURE_VALUE_MIN: f64 = 0.5;

/// One step of a joint trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajRecord {
    pub seed: u64,
    pub t: usize,
    /// Memoryless bidding return from this step on.
    pub r_b: f64,
    /// History-aware bidding return for this step.
    pub r_b_his: f64,
    pub r_p: f64,
    pub s_bid: Vec<f64>,
    pub s_price: Vec<f64>,
    pub a_b: f64,
    pub a_p: f64,
    pub advantage: f64,
    /// Target-scaled value won from this step to the end of the episode.
    pub future_value: f64,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub seed: u64,
    pub records: Vec<TrajRecord>,
    pub budget_exhausted: bool,
}

impl JointTrajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Episode-level bidding return, which is also the episode score.
    pub fn episode_return(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.r_b)
    }
}

/// Pricing return of the branch that switches pricing off from the
/// snapshot's step on, keeping the same bidder and impression stream.
/// A terminal snapshot has nothing left to correct and scores 1.
pub fn counterfactual_return(snapshot: &EnvState, base_policy: &PidBidPolicy, prev_action: Action) -> Result<f64> {
    if snapshot.is_terminal() {
        return Ok(1.0);
    }
    let t0 = snapshot.ledger.t;
    let bounds = snapshot.config.bounds();
    let mut state = snapshot.clone();
    let mut policy = *base_policy;
    let mut prev = prev_action;
    while !state.is_terminal() {
        let view = Observation::new(&state, prev).bid_view;
        let a_b = policy.bid(&view).clamp(0.0, bounds.a_max);
        let (next, _) = env_step(&state, a_b, 0.0)?;
        prev = Action {
            bid_multiplier: a_b,
            price_offset: 0.0,
        };
        state = next;
    }
    let series = EpisodeSeries::from_history(&state.ledger.history);
    Ok(rtg_price(&series, t0))
}

/// Rolls one episode and labels every step with returns and the advantage.
pub fn generate_joint_trajectory(
    controllers: &ControllerConfig,
    env: &EnvConfig,
    seed: u64,
) -> Result<JointTrajectory> {
    env.validate()?;
    controllers.validate()?;
    let bounds = env.bounds();
    let mut state = EnvState::reset(env, seed);
    let mut bidder = PidBidPolicy::for_episode(controllers, env.a_max, seed);
    let mut pricer = PidPricingPolicy::new(controllers, env.p_max, env.budget);
    let mut prev = Action::default();

    struct Pending {
        snapshot: EnvState,
        bidder: PidBidPolicy,
        prev: Action,
        s_bid: Vec<f64>,
        s_price: Vec<f64>,
        action: Action,
        outcome: StepOutcome,
    }
    let mut pending = Vec::with_capacity(env.horizon);
    while !state.is_terminal() {
        let snapshot_bidder = bidder;
        let (action, s_bid, s_price) = {
            let obs = Observation::new(&state, prev);
            let a_b = bidder.bid(&obs.bid_view);
            let a_p = pricer.price(&obs, a_b);
            let action = bounds.clamp(Action {
                bid_multiplier: a_b,
                price_offset: a_p,
            });
            (action, obs.bid_view.features, obs.price_view.features)
        };
        let (next, outcome) = env_step(&state, action.bid_multiplier, action.price_offset)?;
        pending.push(Pending {
            snapshot: state,
            bidder: snapshot_bidder,
            prev,
            s_bid,
            s_price,
            action,
            outcome,
        });
        prev = action;
        state = next;
    }

    let series = EpisodeSeries::from_history(&state.ledger.history);
    let mut records = Vec::with_capacity(pending.len());
    let mut future_value: f64 = series.values.iter().sum();
    for (t, p) in pending.into_iter().enumerate() {
        let r_p = rtg_price(&series, t);
        let counterfactual = counterfactual_return(&p.snapshot, &p.bidder, p.prev)?;
        let advantage = r_p - counterfactual;
        if !advantage.is_finite() {
            return Err(Error::NonFinite(format!("advantage at step {t} of seed {seed}")));
        }
        records.push(TrajRecord {
            seed,
            t,
            r_b: rtg_bid_memoryless(&series, t),
            r_b_his: rtg_bid_historical(&series, t + 1),
            r_p,
            s_bid: p.s_bid,
            s_price: p.s_price,
            a_b: p.action.bid_multiplier,
            a_p: p.action.price_offset,
            advantage,
            future_value: future_value.max(0.0),
            outcome: p.outcome,
        });
        future_value -= series.values[t];
    }
    Ok(JointTrajectory {
        seed,
        records,
        budget_exhausted: state.budget_exhausted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// sha256 of the environment and controller configs used.
    pub config_hash: String,
    pub stage1_records: usize,
    pub dpo_records: usize,
    pub dropped_zero_advantage: usize,
    /// Non-zero advantage but too little value left in the episode.
    pub dropped_low_future_value: usize,
    /// Largest episode-level bidding return in the set.
    pub max_episode_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stage1: Vec<TrajRecord>,
    pub dpo_pool: Vec<TrajRecord>,
}

/// Seeds used for a dataset of `episodes` episodes starting at `base_seed`.
pub fn dataset_seeds(base_seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

pub fn config_hash(env: &EnvConfig, controllers: &ControllerConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(env).expect("env config serializes"));
    h.update(serde_json::to_vec(controllers).expect("controller config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn keep_for_dpo(r: &TrajRecord) -> bool {
    r.advantage != 0.0 && r.future_value >= FUTURE_VALUE_MIN
}

/// Generates all episodes on `workers` threads and assembles the dataset in
/// seed order, so the result does not depend on the worker count.
pub fn generate_dataset(
    env: &EnvConfig,
    controllers: &ControllerConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<Dataset> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;
    let trajectories: Vec<JointTrajectory> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| generate_joint_trajectory(controllers, env, s))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut stage1 = Vec::new();
    let mut dpo_pool = Vec::new();
    let mut dropped_zero_advantage = 0;
    let mut dropped_low_future_value = 0;
    let mut max_episode_return = 0.0f64;
    for traj in trajectories {
        max_episode_return = max_episode_return.max(traj.episode_return());
        for r in traj.records {
            if r.advantage == 0.0 {
                dropped_zero_advantage += 1;
            } else if r.future_value < FUTURE_VALUE_MIN {
                dropped_low_future_value += 1;
            }
            if keep_for_dpo(&r) {
                dpo_pool.push(r.clone());
            }
            stage1.push(r);
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            episodes: seeds.len(),
            seeds: seeds.to_vec(),
            config_hash: config_hash(env, controllers),
            stage1_records: stage1.len(),
            dpo_records: dpo_pool.len(),
            dropped_zero_advantage,
            dropped_low_future_value,
            max_episode_return,
        },
        stage1,
        dpo_pool,
    })
}

/// Generates and writes a dataset into `out_dir`; returns its manifest.
pub fn build_dataset(
    env: &EnvConfig,
    controllers: &ControllerConfig,
    seeds: &[u64],
    workers: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let dataset = generate_dataset(env, controllers, seeds, workers)?;
    dataset.save(out_dir)?;
    Ok(dataset.manifest)
}

fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut out = BufWriter::new(file);
    write(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(out);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_records<W: Write>(records: &[TrajRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R, path: &Path) -> Result<Vec<TrajRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<TrajRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file), path)
}

impl Dataset {
    /// Writes the record files first and the manifest last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(STAGE1_FILE), |w| write_records(&self.stage1, w))?;
        write_atomic(&dir.join(DPO_POOL_FILE), |w| write_records(&self.dpo_pool, w))?;
        write_atomic(&dir.join(MANIFEST_FILE), |w| {
            serde_json::to_writer_pretty(&mut *w, &self.manifest)?;
            w.write_all(b"\n")
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let stage1 = load_records(&dir.join(STAGE1_FILE))?;
        let dpo_pool = load_records(&dir.join(DPO_POOL_FILE))?;
        if stage1.len() != manifest.stage1_records || dpo_pool.len() != manifest.dpo_records {
            return Err(Error::Parse {
                path: manifest_path,
                line: 0,
                message: format!(
                    "manifest lists {} / {} records, files hold {} / {}",
                    manifest.stage1_records,
                    manifest.dpo_records,
                    stage1.len(),
                    dpo_pool.len()
                ),
            });
        }
        Ok(Self {
            manifest,
            stage1,
            dpo_pool,
        })
    }
}

/// Groups stage-1 records into per-seed episodes in step order.
pub fn episodes(records: &[TrajRecord]) -> Vec<Vec<TrajRecord>> {
    let mut out: Vec<Vec<TrajRecord>> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(ep) if ep[0].seed == r.seed && ep.last().map_or(false, |l| l.t + 1 == r.t) => ep.push(r.clone()),
            _ => out.push(vec![r.clone()]),
        }
    }
    out
}
