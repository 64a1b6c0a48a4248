//! Preference fine-tuning of the pricing stream with an energy-based DPO
//! objective.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::model::{Model, Window};
use crate::rng;
use crate::training::{clip_gradients, AdamW, TrainConfig};
use crate::trajgen::{episodes, TrajRecord, FUTURE_VALUE_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Pairs with |A| at or below this are dropped.
    pub delta: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.15,
            epochs: 3,
            lr: 1e-5,
            delta: 0.0,
            batch_size: 32,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("dpo.beta", "must be positive and finite"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("dpo.lr", "must be non-negative and finite"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::config("dpo.delta", "must be non-negative and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dpo.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::config("dpo.weight_decay", "must lie in [0, 1)"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("dpo.grad_clip", "must be non-negative"));
        }
        Ok(())
    }
}

/// A preferred and a rejected pricing action for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub seed: u64,
    pub t: usize,
    pub a_plus: f64,
    pub a_minus: f64,
    pub advantage: f64,
}

/// Labels the applied pricing action against no correction: preferred when
/// it raised the pricing return, rejected when it lowered it.
pub fn build_preference_pairs(records: &[TrajRecord], delta: f64) -> Vec<PreferencePair> {
    records
        .iter()
        .filter(|r| r.advantage.abs() > delta && r.advantage != 0.0 && r.future_value >= FUTURE_VALUE_MIN)
        .map(|r| {
            let (a_plus, a_minus) = if r.advantage > 0.0 { (r.a_p, 0.0) } else { (0.0, r.a_p) };
            PreferencePair {
                seed: r.seed,
                t: r.t,
                a_plus,
                a_minus,
                advantage: r.advantage,
            }
        })
        .collect()
}

/// Energy reduction of `a` relative to `a_ref` under the L1 energy
/// `|a - y|`.
pub fn similarity(a: f64, a_ref: f64, y: f64) -> f64 {
    (a_ref - y).abs() - (a - y).abs()
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn energy_dpo_loss(a: f64, a_ref: f64, a_plus: f64, a_minus: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * (similarity(a, a_ref, a_plus) - similarity(a, a_ref, a_minus)))
}

/// Derivative of [`energy_dpo_loss`] in `a` (sign convention `sign(0) = 0`).
pub fn energy_dpo_grad(a: f64, a_ref: f64, a_plus: f64, a_minus: f64, beta: f64) -> f64 {
    let x = similarity(a, a_ref, a_plus) - similarity(a, a_ref, a_minus);
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let dx = sign(a - a_minus) - sign(a - a_plus);
    -beta * sigmoid(-beta * x) * dx
}

/// Context window for every pair: up to `context` steps of its episode
/// ending at the pair's step.
pub fn pair_windows(
    records: &[TrajRecord],
    pairs: &[PreferencePair],
    context: usize,
    checkpoint: &Checkpoint,
) -> Result<Vec<Window>> {
    let by_seed: HashMap<u64, Vec<TrajRecord>> = episodes(records).into_iter().map(|e| (e[0].seed, e)).collect();
    pairs
        .iter()
        .map(|p| {
            let ep = by_seed
                .get(&p.seed)
                .ok_or_else(|| Error::Empty(format!("no trajectory for seed {}", p.seed)))?;
            let end = ep
                .iter()
                .position(|r| r.t == p.t)
                .ok_or_else(|| Error::Empty(format!("seed {} has no step {}", p.seed, p.t)))?;
            let slice = &ep[(end + 1).saturating_sub(context)..=end];
            Ok(Window::from_records(
                slice,
                &vec![true; slice.len()],
                checkpoint.meta.rtg,
                checkpoint.meta.rtg_scale,
            ))
        })
        .collect()
}

fn last_price(model: &Model, w: &Window) -> f64 {
    *model.predict(w).1.last().expect("non-empty window")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoEpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean |a - a_plus| over all pairs after the epoch.
    pub mean_gap_to_preferred: f64,
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<DpoEpochStats>,
    pub initial_gap_to_preferred: f64,
}

/// Mean loss and the per-tensor gradient of a batch; bidding tensors receive
/// no gradient.
pub fn dpo_batch_grads(
    model: &Model,
    windows: &[&Window],
    refs: &[f64],
    pairs: &[&PreferencePair],
    beta: f64,
) -> (f64, Vec<Mat>) {
    let n = windows.len() as f64;
    let frozen: Vec<bool> = (0..model.tensors.len()).map(|i| model.is_bid_param(i)).collect();
    let parts: Vec<(f64, Vec<Option<Mat>>)> = windows
        .par_iter()
        .zip(refs.par_iter().zip(pairs.par_iter()))
        .map(|(w, (&a_ref, p))| {
            let mut tape = Tape::with_frozen(&model.tensors, &frozen);
            let out = model.forward(&mut tape, w);
            let last = w.len() - 1;
            let a = tape.value(out.price).data[last];
            let loss = energy_dpo_loss(a, a_ref, p.a_plus, p.a_minus, beta);
            let mut seed = Mat::zeros(w.len(), 1);
            seed.data[last] = energy_dpo_grad(a, a_ref, p.a_plus, p.a_minus, beta) / n;
            (loss, tape.backward(&[(out.price, seed)]))
        })
        .collect();
    let mut grads: Vec<Mat> = model.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
    let mut total = 0.0;
    for (loss, g) in parts {
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                acc.add_assign(&gi);
            }
        }
    }
    (total / n, grads)
}

/// Fine-tunes the pricing stream of `checkpoint` on `pairs`. The input model
/// is the frozen reference; bidding tensors are not updated.
pub fn finetune(
    checkpoint: &Checkpoint,
    records: &[TrajRecord],
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("preference pair set".into()));
    }
    let reference = &checkpoint.model;
    let windows = pair_windows(records, pairs, reference.config.context, checkpoint)?;
    let refs: Vec<f64> = windows.par_iter().map(|w| last_price(reference, w)).collect();
    let gap = |model: &Model| {
        let s: f64 = windows
            .par_iter()
            .zip(pairs.par_iter())
            .map(|(w, p)| (last_price(model, w) - p.a_plus).abs())
            .sum();
        s / pairs.len() as f64
    };
    let initial_gap = gap(reference);

    let mut model = reference.clone();
    let trainable: Vec<bool> = (0..model.tensors.len()).map(|i| !model.is_bid_param(i)).collect();
    let mut opt = AdamW::new(&model);
    let moments = TrainConfig::default();
    let mut r = rng::stream(cfg.seed, rng::DPO_STREAM);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let w: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let a_ref: Vec<f64> = chunk.iter().map(|&i| refs[i]).collect();
            let p: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, mut grads) = dpo_batch_grads(&model, &w, &a_ref, &p, cfg.beta);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("DPO loss at epoch {epoch}")));
            }
            clip_gradients(&mut grads, &trainable, cfg.grad_clip);
            opt.update_with(&mut model, &grads, &trainable, cfg.lr, cfg.weight_decay, &moments);
            loss_sum += loss;
            batches += 1;
        }
        curve.push(DpoEpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            mean_gap_to_preferred: gap(&model),
        });
    }
    let mut meta = checkpoint.meta.clone();
    if cfg.epochs > 0 {
        meta.stage = Stage::Dpo;
    }
    Ok(DpoOutcome {
        checkpoint: Checkpoint { model, meta },
        curve,
        initial_gap_to_preferred: initial_gap,
    })
}
