//! Supervised action regression on the joint trajectory dataset.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, RtgVariant, Window};
use crate::rng;
use crate::trajgen::{episodes, TrajRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lambda_b: f64,
    pub lambda_p: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub rtg: RtgVariant,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            weight_decay: 1e-4,
            lambda_b: 1.0,
            lambda_p: 1.0,
            epochs: 50,
            seed: 0,
            grad_clip: 1.0,
            rtg: RtgVariant::Memoryless,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{key}"), msg))
            }
        };
        check(self.lr.is_finite() && self.lr >= 0.0, "lr", "must be non-negative and finite")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0 && self.weight_decay < 1.0,
            "weight_decay",
            "must lie in [0, 1)",
        )?;
        check(self.lambda_b.is_finite() && self.lambda_b >= 0.0, "lambda_b", "must be non-negative and finite")?;
        check(self.lambda_p.is_finite() && self.lambda_p >= 0.0, "lambda_p", "must be non-negative and finite")?;
        check(self.epochs > 0, "epochs", "must be positive")?;
        check(self.grad_clip.is_finite() && self.grad_clip >= 0.0, "grad_clip", "must be non-negative")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps", "must be positive")
    }
}

/// Mean over positions of `lb (pb - tb)^2 + lp (pp - tp)^2`.
pub fn action_loss(pred_b: &[f64], pred_p: &[f64], target_b: &[f64], target_p: &[f64], lambda_b: f64, lambda_p: f64) -> f64 {
    let n = pred_b.len();
    assert!(pred_p.len() == n && target_b.len() == n && target_p.len() == n);
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = (0..n)
        .map(|i| lambda_b * (pred_b[i] - target_b[i]).powi(2) + lambda_p * (pred_p[i] - target_p[i]).powi(2))
        .sum();
    sum / n as f64
}

/// Summed (not averaged) action loss of one window and its parameter
/// gradients.
pub fn window_loss_and_grads(model: &Model, window: &Window, lambda_b: f64, lambda_p: f64) -> (f64, Vec<Option<Mat>>) {
    let mut tape = Tape::new(&model.tensors);
    let out = model.forward(&mut tape, window);
    let n = window.len();
    let (pb, pp) = (tape.value(out.bid), tape.value(out.price));
    let mut gb = Mat::zeros(n, 1);
    let mut gp = Mat::zeros(n, 1);
    let mut loss = 0.0;
    for i in 0..n {
        let eb = pb.data[i] - window.a_b[i];
        let ep = pp.data[i] - window.a_p[i];
        loss += lambda_b * eb * eb + lambda_p * ep * ep;
        gb.data[i] = 2.0 * lambda_b * eb;
        gp.data[i] = 2.0 * lambda_p * ep;
    }
    let grads = tape.backward(&[(out.bid, gb), (out.price, gp)]);
    (loss, grads)
}

/// Mean action loss and gradient over a set of windows. Per-window work may
/// run in parallel; sums are taken in window order.
pub fn batch_loss_and_grads(model: &Model, windows: &[Window], lambda_b: f64, lambda_p: f64) -> (f64, Vec<Mat>) {
    let parts: Vec<(f64, Vec<Option<Mat>>)> = windows
        .par_iter()
        .map(|w| window_loss_and_grads(model, w, lambda_b, lambda_p))
        .collect();
    let positions: usize = windows.iter().map(Window::len).sum();
    let mut total = 0.0;
    let mut grads: Vec<Mat> = model.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
    for (loss, g) in parts {
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                acc.add_assign(&gi);
            }
        }
    }
    let inv = 1.0 / positions.max(1) as f64;
    for g in &mut grads {
        g.data.iter_mut().for_each(|v| *v *= inv);
    }
    (total * inv, grads)
}

/// Mean action loss over windows without gradients.
pub fn dataset_loss(model: &Model, windows: &[Window], lambda_b: f64, lambda_p: f64) -> f64 {
    let parts: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|w| {
            let (pb, pp) = model.predict(w);
            (action_loss(&pb, &pp, &w.a_b, &w.a_p, lambda_b, lambda_p) * w.len() as f64, w.len())
        })
        .collect();
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), (l, k)| (s + l, n + k));
    sum / n.max(1) as f64
}

/// Adam moments with decoupled weight decay:
/// `theta <- theta * (1 - wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
/// The decay is not scaled by the learning rate, so it acts even at lr 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let zeros = || model.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update to the tensors marked trainable.
    pub fn update(&mut self, model: &mut Model, grads: &[Mat], trainable: &[bool], cfg: &TrainConfig) {
        self.update_with(model, grads, trainable, cfg.lr, cfg.weight_decay, cfg)
    }

    pub fn update_with(
        &mut self,
        model: &mut Model,
        grads: &[Mat],
        trainable: &[bool],
        lr: f64,
        weight_decay: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..model.tensors.len() {
            if !trainable[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, p) in model.tensors[i].data.iter_mut().enumerate() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                *p = *p * (1.0 - weight_decay) - lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Scales gradients so their global norm is at most `clip`; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [Mat], trainable: &[bool], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .map(|(g, _)| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Episodes of the dataset with their sampling weights.
pub struct EpisodeSampler {
    pub episodes: Vec<Vec<TrajRecord>>,
    cumulative: Vec<f64>,
}

impl EpisodeSampler {
    /// Weights proportional to the rank of the episode-level bidding return
    /// (lowest rank 1, ties broken by dataset order).
    pub fn new(records: &[TrajRecord]) -> Self {
        let episodes = episodes(records);
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.sort_by(|&a, &b| episodes[a][0].r_b.total_cmp(&episodes[b][0].r_b).then(a.cmp(&b)));
        let mut weight = vec![0.0; episodes.len()];
        for (rank, &e) in order.iter().enumerate() {
            weight[e] = (rank + 1) as f64;
        }
        let mut cumulative = Vec::with_capacity(weight.len());
        let mut acc = 0.0;
        for w in weight {
            acc += w;
            cumulative.push(acc);
        }
        Self { episodes, cumulative }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total = *self.cumulative.last().unwrap_or(&1.0);
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = (c - prev) / total;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample_episode(&self, r: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty sampler");
        let u = r.random_range(0.0..total);
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }

    /// A window of up to `context` steps ending at a uniformly drawn step of
    /// a rank-weighted episode.
    pub fn sample_window(&self, r: &mut impl Rng, context: usize, variant: RtgVariant, rtg_scale: f64) -> Window {
        let ep = &self.episodes[self.sample_episode(r)];
        let end = r.random_range(0..ep.len());
        let start = (end + 1).saturating_sub(context);
        let slice = &ep[start..=end];
        Window::from_records(slice, &vec![true; slice.len()], variant, rtg_scale)
    }
}

/// Consecutive non-overlapping windows covering every record once.
pub fn tiled_windows(records: &[TrajRecord], context: usize, variant: RtgVariant, rtg_scale: f64) -> Vec<Window> {
    let mut out = Vec::new();
    for ep in episodes(records) {
        for chunk in ep.chunks(context) {
            out.push(Window::from_records(chunk, &vec![true; chunk.len()], variant, rtg_scale));
        }
    }
    out
}

/// Scale for the bidding return input: the largest episode return, or 1.
pub fn rtg_scale(records: &[TrajRecord]) -> f64 {
    let m = records.iter().filter(|r| r.t == 0).map(|r| r.r_b).fold(0.0, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest mean loss.
    pub best: Model,
    pub best_loss: f64,
    pub curve: Vec<EpochStats>,
    pub rtg_scale: f64,
    /// Set when training stopped on a non-finite loss; `best` is then the
    /// last good state.
    pub aborted: Option<String>,
}

/// Stage-1 training from a fresh model.
pub fn train_stage1(records: &[TrajRecord], model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(records, model, cfg, |_| {})
}

/// As [`train_stage1`], calling `on_epoch` after every epoch.
pub fn train_with(
    records: &[TrajRecord],
    mut model: Model,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("stage-1 dataset".into()));
    }
    let scale = rtg_scale(records);
    let sampler = EpisodeSampler::new(records);
    let context = model.config.context;
    let windows_per_epoch = records.len().div_ceil(context).max(1);
    let steps_per_epoch = windows_per_epoch.div_ceil(cfg.batch_size);
    let trainable = vec![true; model.tensors.len()];
    let mut opt = AdamW::new(&model);
    let mut r = rng::stream(cfg.seed, rng::TRAIN_STREAM);

    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut drawn = 0;
        for _ in 0..steps_per_epoch {
            let size = cfg.batch_size.min(windows_per_epoch - drawn);
            drawn += size;
            let batch: Vec<Window> = (0..size)
                .map(|_| sampler.sample_window(&mut r, context, cfg.rtg, scale))
                .collect();
            let (loss, mut grads) = batch_loss_and_grads(&model, &batch, cfg.lambda_b, cfg.lambda_p);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Ok(TrainOutcome {
                    best,
                    best_loss,
                    curve,
                    rtg_scale: scale,
                    aborted: Some(format!("non-finite loss at epoch {epoch}")),
                });
            }
            norm_sum += clip_gradients(&mut grads, &trainable, cfg.grad_clip);
            opt.update(&mut model, &grads, &trainable, cfg);
            loss_sum += loss;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            grad_norm: norm_sum / steps_per_epoch as f64,
        };
        on_epoch(&stats);
        curve.push(stats);
        if stats.mean_loss < best_loss {
            best_loss = stats.mean_loss;
            best = model.clone();
        }
    }
    Ok(TrainOutcome {
        best,
        best_loss,
        curve,
        rtg_scale: scale,
        aborted: None,
    })
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and offset of the worst coordinate.
    pub worst: (String, usize),
}

/// Checks the gradient of the mean action loss over `windows` on a random
/// subset of at least `min_coords` coordinates, spread across all tensors.
/// The relative error denominator is `max(|g|, 1e-8)` with `g` the analytic
/// gradient. `corrupt` zeroes the analytic gradient of the given tensor
/// (first coordinate) to exercise the harness.
pub fn grad_check(
    model: &Model,
    windows: &[Window],
    eps: f64,
    min_coords: usize,
    seed: u64,
    corrupt: Option<usize>,
) -> GradCheckReport {
    let (lb, lp) = (1.0, 1.0);
    let (_, mut grads) = batch_loss_and_grads(model, windows, lb, lp);
    if let Some(t) = corrupt {
        grads[t].data[0] = 0.0;
    }
    let mut r = rng::stream(seed, rng::GRAD_CHECK_STREAM);
    let per_tensor = min_coords.div_ceil(model.tensors.len()).max(1);
    let mut coords = Vec::new();
    for (i, t) in model.tensors.iter().enumerate() {
        if corrupt == Some(i) {
            coords.push((i, 0));
        }
        let take = per_tensor.min(t.len());
        for _ in 0..take {
            coords.push((i, r.random_range(0..t.len())));
        }
    }
    while coords.len() < min_coords {
        let i = r.random_range(0..model.tensors.len());
        coords.push((i, r.random_range(0..model.tensors[i].len())));
    }

    let positions: usize = windows.iter().map(Window::len).sum();
    let mut probe = model.clone();
    let mut worst = (0.0, (String::new(), 0));
    for &(i, k) in &coords {
        let orig = probe.tensors[i].data[k];
        probe.tensors[i].data[k] = orig + eps;
        let up: Vec<(Vec<f64>, Vec<f64>)> = windows.par_iter().map(|w| probe.predict(w)).collect();
        probe.tensors[i].data[k] = orig - eps;
        let down: Vec<(Vec<f64>, Vec<f64>)> = windows.par_iter().map(|w| probe.predict(w)).collect();
        probe.tensors[i].data[k] = orig;
        // (p+ - t)^2 - (p- - t)^2 = (p+ - p-)(p+ + p- - 2t), which avoids
        // cancelling two O(1) loss values.
        let mut diff = 0.0;
        for (w, ((ub, up_), (db, dp))) in windows.iter().zip(up.iter().zip(&down)) {
            for j in 0..w.len() {
                diff += lb * (ub[j] - db[j]) * (ub[j] + db[j] - 2.0 * w.a_b[j]);
                diff += lp * (up_[j] - dp[j]) * (up_[j] + dp[j] - 2.0 * w.a_p[j]);
            }
        }
        let numeric = diff / positions as f64 / (2.0 * eps);
        let analytic = grads[i].data[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        if rel > worst.0 || worst.1 .0.is_empty() {
            worst = (rel, (model.names[i].clone(), k));
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        coordinates: coords.len(),
        worst: worst.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn action_loss_examples() {
        assert_eq!(action_loss(&[1.0, 2.0], &[0.1, 0.2], &[1.0, 2.0], &[0.1, 0.2], 1.0, 1.0), 0.0);
        assert_eq!(action_loss(&[1.0], &[2.0], &[0.0], &[0.0], 1.0, 1.0), 5.0);
        let a = action_loss(&[1.0], &[2.0], &[0.0], &[0.0], 1.0, 0.0);
        let b = action_loss(&[1.0], &[-7.0], &[0.0], &[0.0], 1.0, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn decay_acts_without_learning_rate() {
        let mut model = Model::new(ModelConfig::linear_toy(), 0).unwrap().randomized(0, 0.5);
        let before = model.clone();
        let grads: Vec<Mat> = model.tensors.iter().map(|t| Mat::filled(t.rows, t.cols, 123.0)).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(&model);
        opt.update(&mut model, &grads, &vec![true; grads.len()], &cfg);
        for (a, b) in model.tensors.iter().zip(&before.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, y * 0.9);
            }
        }
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut model = Model::new(ModelConfig::linear_toy(), 0).unwrap().randomized(0, 0.5);
        let before = model.clone();
        let grads: Vec<Mat> = model.tensors.iter().map(|t| Mat::filled(t.rows, t.cols, 1.0)).collect();
        let trainable: Vec<bool> = (0..grads.len()).map(|i| i % 2 == 0).collect();
        AdamW::new(&model).update(&mut model, &grads, &trainable, &TrainConfig::default());
        for i in 0..grads.len() {
            assert_eq!(model.tensors[i] == before.tensors[i], !trainable[i]);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Mat::filled(2, 2, 3.0)];
        let norm = clip_gradients(&mut g, &[true], 1.0);
        assert_eq!(norm, 6.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_weights() {
        use crate::auction_env::EnvConfig;
        use crate::controllers::ControllerConfig;
        use crate::trajgen::{dataset_seeds, generate_dataset};
        let env = EnvConfig {
            horizon: 6,
            mean_batch_size: 5.0,
            ..Default::default()
        };
        let ds = generate_dataset(&env, &ControllerConfig::default(), &dataset_seeds(0, 4), 1).unwrap();
        let s = EpisodeSampler::new(&ds.stage1);
        let p = s.probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut returns: Vec<(f64, f64)> = s.episodes.iter().map(|e| e[0].r_b).zip(p.iter().copied()).collect();
        returns.sort_by(|a, b| a.0.total_cmp(&b.0));
        let probs: Vec<f64> = returns.iter().map(|x| x.1).collect();
        assert_eq!(probs, vec![0.1, 0.2, 0.3, 0.4]);
    }
}
