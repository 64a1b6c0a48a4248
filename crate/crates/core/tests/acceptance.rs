//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line and
//! then asserts. A shared lock runs them one at a time so the runtime
//! budgets are measured without contention.

use std::f64::consts::LN_2;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;

use jdbp_core::auction_env::EnvConfig;
use jdbp_core::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use jdbp_core::config::Config;
use jdbp_core::controllers::ControllerConfig;
use jdbp_core::dpo::{
    build_preference_pairs, energy_dpo_loss, finetune, pair_windows, DpoConfig, PreferencePair,
};
use jdbp_core::eval::ablation_table;
use jdbp_core::model::{Model, ModelConfig, RtgVariant, Window};
use jdbp_core::autodiff::Mat;
use jdbp_core::oracle::{random_instance, solve_joint, solve_original, verify_theorem1, OracleInstance};
use jdbp_core::pipeline::{run_experiment, Progress};
use jdbp_core::rng;
use jdbp_core::rtg::{rtg_bid_memoryless, rtg_price, score, EpisodeSeries};
use jdbp_core::training::{grad_check, rtg_scale, tiled_windows};
use jdbp_core::trajgen::{dataset_seeds, generate_dataset, Dataset, FUTURE_VALUE_MIN};

static SERIAL: Mutex<()> = Mutex::new(());

/// Outcome of one criterion: named checks plus the runtime budget.
struct Criterion {
    id: &'static str,
    budget: Duration,
    start: Instant,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(id: &'static str, budget_secs: u64) -> Self {
        Self {
            id,
            budget: Duration::from_secs(budget_secs),
            start: Instant::now(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push((name.into(), ok));
    }

    fn finish(mut self) {
        let elapsed = self.start.elapsed();
        self.check(format!("runtime {:.1}s < {}s", elapsed.as_secs_f64(), self.budget.as_secs()), elapsed < self.budget);
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        let detail: Vec<String> = self
            .checks
            .iter()
            .map(|(n, ok)| format!("{n}: {}", if *ok { "ok" } else { "failed" }))
            .collect();
        println!("criterion {}: {verdict} ({})", self.id, detail.join("; "));
        assert!(failed.is_empty(), "criterion {} failed: {failed:?}", self.id);
    }
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Exhaustive maximiser of `sum x v` under `sum x c <= budget` and
/// `sum x c <= sum x v`, written independently of the library solver.
fn brute_force_original(inst: &OracleInstance, budget: f64) -> f64 {
    let n = inst.items.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let (mut v, mut c) = (0.0, 0.0);
        for (i, it) in inst.items.iter().enumerate() {
            if mask & (1 << i) != 0 {
                v += it.v;
                c += it.c;
            }
        }
        if c <= budget + 1e-9 && c <= v + 1e-9 {
            best = best.max(v);
        }
    }
    best
}

#[test]
fn criterion_1_joint_problem_reduces_to_bid_only() {
    let _g = lock();
    let mut c = Criterion::new("1", 10);
    let (mut equal, mut pricing, mut corollary, mut independent) = (true, true, true, true);
    for i in 0..200u64 {
        let n = 1 + (i as usize % 12);
        let inst = random_instance(2024, i, n);
        let joint = solve_joint(&inst).unwrap();
        let relaxed = solve_original(&inst.with_budget(inst.budget + inst.bal)).unwrap();
        equal &= joint.objective == relaxed.objective;
        independent &= (brute_force_original(&inst, inst.budget + inst.bal) - joint.objective).abs() <= 1e-9;
        if joint.feasible && joint.count() > 0 {
            let y = joint.pricing.expect("feasible joint optimum carries a pricing");
            let repaid = y * joint.count() as f64 + inst.bal;
            pricing &= repaid.abs() <= 1e-9;
        }
        let report = verify_theorem1(&inst).unwrap();
        pricing &= report.pricing_feasible;
        corollary &= report.corollary_holds;
        equal &= report.equal_optima;
    }
    c.check("solve_joint == solve_original(B + bal) on 200 instances", equal);
    c.check("independent enumeration agrees within 1e-9", independent);
    c.check("|sum y + bal| <= 1e-9", pricing);
    c.check("V*_O <= V*_J", corollary);
    c.finish();
}

fn fuzz_series(r: &mut impl Rng) -> EpisodeSeries {
    let n = r.random_range(1..=48);
    let mut draw = |lo: f64, hi: f64, zero: f64| -> Vec<f64> {
        (0..n)
            .map(|_| if r.random_bool(zero) { 0.0 } else { r.random_range(lo..hi) })
            .collect()
    };
    let values = draw(0.0, 10.0, 0.2);
    let precosts = draw(0.0, 12.0, 0.2);
    let corrections = draw(-3.0, 1.0, 0.5);
    EpisodeSeries::new(values, precosts, corrections)
}

#[test]
fn criterion_2_return_properties() {
    let _g = lock();
    let mut c = Criterion::new("2", 10);
    let mut r = rng::stream(7, 1);
    let (mut bounded, mut memoryless, mut score_eq, mut formula) = (true, true, true, true);
    for _ in 0..10_000 {
        let s = fuzz_series(&mut r);
        let n = s.len();
        for t in 0..=n {
            let p = rtg_price(&s, t);
            bounded &= (0.0..=1.0).contains(&p);
        }
        let t = r.random_range(0..=n);
        let before = rtg_bid_memoryless(&s, t);
        let mut m = s.clone();
        for i in 0..t {
            m.values[i] = r.random_range(0.0..50.0);
            m.precosts[i] = r.random_range(0.0..50.0);
            m.corrections[i] = r.random_range(-5.0..5.0);
        }
        memoryless &= rtg_bid_memoryless(&m, t).to_bits() == before.to_bits();

        let v: f64 = s.values[t..].iter().sum();
        let cost: f64 = s.precosts[t..].iter().sum();
        let expected = if v <= 0.0 {
            0.0
        } else if cost <= 0.0 {
            v
        } else {
            (v / cost).powi(2).min(1.0) * v
        };
        formula &= (before - expected).abs() <= 1e-12 * (1.0 + expected.abs());
        score_eq &= score(&s.values, &s.precosts) == rtg_bid_memoryless(&s, 0);
    }
    c.check("rtg_price in [0, 1] over 10,000 series", bounded);
    c.check("memoryless return ignores prefix mutations", memoryless);
    c.check("memoryless return matches direct evaluation", formula);
    c.check("score == memoryless return at t = 0", score_eq);
    c.finish();
}

fn one_episode() -> Vec<jdbp_core::trajgen::TrajRecord> {
    generate_dataset(&EnvConfig::default(), &ControllerConfig::default(), &dataset_seeds(0, 1), 1)
        .unwrap()
        .stage1
}

#[test]
fn criterion_3_gradient_correctness() {
    let _g = lock();
    let mut c = Criterion::new("3", 60);
    let recs = one_episode();
    let scale = rtg_scale(&recs);

    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 0).unwrap().randomized(1, 0.1);
    let windows = tiled_windows(&recs, cfg.context, RtgVariant::Memoryless, scale);
    let full = grad_check(&model, &windows[..1], 1e-4, 200, 0, None);
    c.check(
        format!("default config max rel error {:.2e} < 1e-4 over {} coords", full.max_rel_error, full.coordinates),
        full.max_rel_error < 1e-4 && full.coordinates >= 200,
    );

    let toy = ModelConfig::linear_toy();
    let model = Model::new(toy.clone(), 0).unwrap().randomized(2, 0.1);
    let windows = tiled_windows(&recs, toy.context, RtgVariant::Memoryless, scale);
    let lin = grad_check(&model, &windows[..3], 1e-4, 200, 0, None);
    c.check(format!("linear-only max rel error {:.2e} < 1e-9", lin.max_rel_error), lin.max_rel_error < 1e-9);
    c.finish();
}

fn random_window(r: &mut impl Rng, n: usize, cfg: &ModelConfig) -> Window {
    let mut v = |k: usize| (0..k).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    Window {
        timesteps: (0..n).collect(),
        rtg_b: v(n),
        rtg_p: v(n),
        s_bid: Mat::from_vec(n, cfg.bid_features, v(n * cfg.bid_features)),
        s_price: Mat::from_vec(n, cfg.price_features, v(n * cfg.price_features)),
        a_b: v(n),
        a_p: v(n),
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn criterion_4_architecture_invariants() {
    let _g = lock();
    let mut c = Criterion::new("4", 30);
    let cfg = ModelConfig {
        embed_dim: 32,
        context: 10,
        ..Default::default()
    };
    let mut r = rng::stream(11, 2);
    let (mut causal, mut one_way, mut bid_reaches_price, mut enhance) = (true, true, true, true);
    for trial in 0..8u64 {
        let model = Model::new(cfg.clone(), trial).unwrap().randomized(100 + trial, 0.3);
        let n = r.random_range(2..=cfg.context);
        let w = random_window(&mut r, n, &cfg);
        let (b, p) = model.predict(&w);

        // everything from the cut on, and the action at the step before it,
        // is invisible to predictions before the cut
        let cut = r.random_range(1..n);
        let mut changed = w.clone();
        changed.a_b[cut - 1] += 5.0;
        changed.a_p[cut - 1] -= 5.0;
        for i in cut..n {
            changed.rtg_b[i] = r.random_range(-9.0..9.0);
            changed.rtg_p[i] = r.random_range(-9.0..9.0);
            changed.a_b[i] = r.random_range(-9.0..9.0);
            changed.a_p[i] = r.random_range(-9.0..9.0);
            changed.timesteps[i] = r.random_range(0..48);
            for k in 0..cfg.bid_features {
                changed.s_bid.data[i * cfg.bid_features + k] = r.random_range(-9.0..9.0);
            }
            for k in 0..cfg.price_features {
                changed.s_price.data[i * cfg.price_features + k] = r.random_range(-9.0..9.0);
            }
        }
        let (b2, p2) = model.predict(&changed);
        causal &= bits(&b[..cut]) == bits(&b2[..cut]) && bits(&p[..cut]) == bits(&p2[..cut]);

        let mut pricing_changed = model.clone();
        for i in 0..model.tensors.len() {
            if !model.is_bid_param(i) {
                for v in &mut pricing_changed.tensors[i].data {
                    *v += r.random_range(-0.1..0.1);
                }
            }
        }
        let mut price_inputs = w.clone();
        for v in &mut price_inputs.s_price.data {
            *v += 1.0;
        }
        price_inputs.rtg_p.iter_mut().for_each(|v| *v -= 0.5);
        price_inputs.a_p.iter_mut().for_each(|v| *v *= -1.0);
        one_way &= bits(&pricing_changed.predict(&w).0) == bits(&b);
        one_way &= bits(&model.predict(&price_inputs).0) == bits(&b);

        let mut bid_changed = model.clone();
        let idx = model.param_index("bid.layer0.mlp.w1").unwrap();
        bid_changed.tensors[idx].data.iter_mut().for_each(|v| *v += 0.1);
        bid_reaches_price &= bits(&bid_changed.predict(&w).1) != bits(&p);

        let mut zeroed = model.clone();
        let e = zeroed.param_index("gca.enhance").unwrap();
        zeroed.tensors[e].data.iter_mut().for_each(|v| *v = 0.0);
        let named: Vec<(String, Mat)> = zeroed
            .names
            .iter()
            .cloned()
            .zip(zeroed.tensors.iter().cloned())
            .filter(|(name, _)| !name.starts_with("gca."))
            .collect();
        let ablated = Model::from_tensors(
            ModelConfig {
                use_gca: false,
                ..cfg.clone()
            },
            named,
        )
        .unwrap();
        let (zb, zp) = zeroed.predict(&w);
        let (ab, ap) = ablated.predict(&w);
        enhance &= bits(&zb) == bits(&ab) && bits(&zp) == bits(&ap);
    }
    c.check("causality fuzz", causal);
    c.check("pricing parameters and inputs never reach the bid output", one_way);
    c.check("bidding parameters reach the pricing output", bid_reaches_price);
    c.check("W_enhance = 0 equals the ablation without GCA bitwise", enhance);
    c.finish();
}

#[test]
fn criterion_5_preference_objective() {
    let _g = lock();
    let mut c = Criterion::new("5", 120);
    let mut r = rng::stream(5, 3);

    let mut at_ref = 0.0f64;
    for _ in 0..1000 {
        let a = r.random_range(-2.0..2.0);
        let loss = energy_dpo_loss(a, a, r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.01..5.0));
        at_ref = at_ref.max((loss - LN_2).abs());
    }
    c.check(format!("loss at a = a_ref is ln 2 (max dev {at_ref:.1e})"), at_ref <= 1e-9);

    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let hand = [
        (energy_dpo_loss(1.0, 0.0, 1.0, -1.0, 1.0), -sigma(2.0).ln()),
        (energy_dpo_loss(-1.0, 0.0, 1.0, -1.0, 1.0), -sigma(-2.0).ln()),
        (energy_dpo_loss(1.0, 0.0, 1.0, -1.0, 1.0), 0.126928),
    ];
    c.check("hand-evaluated pairs within 1e-6", hand.iter().all(|(got, want)| (got - want).abs() <= 1e-6));

    // between the two candidates, moving towards the preferred one never
    // raises the loss
    let mut monotone = true;
    for _ in 0..5000 {
        let a_ref = r.random_range(-2.0..2.0);
        let (lo, hi): (f64, f64) = (r.random_range(-3.0..0.0), r.random_range(0.0..3.0));
        let (a_plus, a_minus) = if r.random_bool(0.5) { (hi, lo) } else { (lo, hi) };
        let beta = r.random_range(0.01..5.0);
        let (x, y) = (r.random_range(lo..=hi), r.random_range(lo..=hi));
        let (near, far) = if (x - a_plus).abs() <= (y - a_plus).abs() { (x, y) } else { (y, x) };
        monotone &= energy_dpo_loss(near, a_ref, a_plus, a_minus, beta) <= energy_dpo_loss(far, a_ref, a_plus, a_minus, beta) + 1e-12;
    }
    c.check("monotonicity fuzz", monotone);

    let ds = generate_dataset(&EnvConfig::default(), &ControllerConfig::default(), &dataset_seeds(0, 4), 1).unwrap();
    let scale = rtg_scale(&ds.stage1);
    let ckpt = Checkpoint {
        model: Model::new(
            ModelConfig {
                embed_dim: 32,
                ..Default::default()
            },
            0,
        )
        .unwrap()
        .randomized(3, 0.1),
        meta: CheckpointMeta {
            stage: Stage::Stage1,
            rtg: RtgVariant::Memoryless,
            rtg_scale: scale,
            max_episode_return: scale,
            best_loss: None,
            seed: 0,
        },
    };
    let base = build_preference_pairs(&ds.dpo_pool, 0.0);
    let windows = pair_windows(&ds.stage1, &base, ckpt.model.config.context, &ckpt).unwrap();
    let pairs: Vec<PreferencePair> = base
        .iter()
        .zip(&windows)
        .map(|(p, w)| {
            let a_ref = *ckpt.model.predict(w).1.last().unwrap();
            PreferencePair {
                a_plus: a_ref + 1.0,
                a_minus: a_ref - 1.0,
                ..*p
            }
        })
        .collect();
    let cfg = DpoConfig::default();
    let out = finetune(&ckpt, &ds.stage1, &pairs, &cfg).unwrap();
    let mut gaps = vec![out.initial_gap_to_preferred];
    gaps.extend(out.curve.iter().map(|e| e.mean_gap_to_preferred));
    c.check(
        format!("mean |a - a_plus| strictly decreases over {} epochs: {gaps:.6?}", cfg.epochs),
        out.curve.len() == 3 && cfg.beta == 0.15 && cfg.lr == 1e-5 && gaps.windows(2).all(|w| w[1] < w[0]),
    );
    c.finish();
}

/// Recounts both DPO filter drops from the raw records and compares them,
/// and the kept pool, with what the generator reported.
fn filters_match(ds: &Dataset) -> (usize, usize, bool) {
    let zero_adv = ds.stage1.iter().filter(|r| r.advantage == 0.0).count();
    let low_value = ds
        .stage1
        .iter()
        .filter(|r| r.advantage != 0.0 && r.future_value < FUTURE_VALUE_MIN)
        .count();
    let kept: Vec<_> = ds
        .stage1
        .iter()
        .filter(|r| r.advantage != 0.0 && r.future_value >= FUTURE_VALUE_MIN)
        .cloned()
        .collect();
    let m = &ds.manifest;
    let ok = m.dropped_zero_advantage == zero_adv && m.dropped_low_future_value == low_value && ds.dpo_pool == kept;
    (zero_adv, low_value, ok)
}

#[test]
fn criterion_6_trajectory_pipeline() {
    let _g = lock();
    let mut c = Criterion::new("6", 120);
    let env = EnvConfig::default();
    let ctl = ControllerConfig::default();

    let zero = ControllerConfig {
        price: ctl.price.zero_gains(),
        ..ctl
    };
    let zds = generate_dataset(&env, &zero, &dataset_seeds(500, 10), 1).unwrap();
    c.check(
        "zero-gain pricing gives all-zero advantages",
        zds.stage1.iter().all(|r| r.advantage == 0.0 && r.a_p == 0.0) && zds.dpo_pool.is_empty(),
    );

    let seeds = dataset_seeds(0, 200);
    let one = generate_dataset(&env, &ctl, &seeds, 1).unwrap();
    let three = generate_dataset(&env, &ctl, &seeds, 3).unwrap();
    c.check("200 episodes of 48 steps", one.stage1.len() == 200 * 48);
    c.check("identical across worker counts", one == three);

    let (zero_adv, low_value, ok) = filters_match(&one);
    c.check(
        format!("default data: filters drop exactly {zero_adv} zero-advantage and {low_value} low-value records"),
        ok,
    );

    let sparse_env = EnvConfig {
        mean_batch_size: 0.5,
        ..env
    };
    let sparse = generate_dataset(&sparse_env, &ctl, &dataset_seeds(900, 50), 1).unwrap();
    let (zero_adv, low_value, ok) = filters_match(&sparse);
    c.check(
        format!("sparse traffic: filters drop exactly {zero_adv} zero-advantage and {low_value} low-value records, both nonzero"),
        ok && zero_adv > 0 && low_value > 0,
    );
    c.finish();
}

/// Desk-scale configuration for the end-to-end comparison: default
/// environment and controllers, a smaller model and a larger step size so
/// training converges within the time budget.
fn experiment_config() -> Config {
    let mut c = Config::default();
    c.gen.episodes = 200;
    c.model.embed_dim = 32;
    c.train.lr = 1e-3;
    c.train.epochs = 20;
    c
}

#[test]
fn criterion_7_end_to_end_directions() {
    let _g = lock();
    let mut c = Criterion::new("7", 30 * 60);
    let config = experiment_config();
    let exp = run_experiment(&config, |p| {
        if let Progress::Stage(s) = p {
            println!("  [{:>6.1}s] {s}", c.start.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    let summaries = &exp.ablation.report.summaries;
    print!("{}", ablation_table(summaries, Some(&exp.ablation.flags)));
    let get = |l: &str| summaries.iter().find(|s| s.policy == l).unwrap();
    let (pid, stage1, full, his) = (get("pid"), get("stage1"), get("full"), get("his_rtg"));
    println!(
        "  score with corrected payments: stage1 {:.4}, full {:.4}",
        stage1.score_payment_mean, full.score_payment_mean
    );
    c.check(
        format!("(a) stage1 {:.2} >= pid {:.2}", stage1.score_precost_mean, pid.score_precost_mean),
        stage1.score_precost_mean >= pid.score_precost_mean,
    );
    c.check(
        format!("(b) full {:.2} >= stage1 {:.2}", full.score_precost_mean, stage1.score_precost_mean),
        full.score_precost_mean >= stage1.score_precost_mean,
    );
    c.check(
        format!(
            "(c) his_rtg ratio {:.4} strictly closer to 1 than memoryless {:.4}",
            his.tcpa_cpa_mean, stage1.tcpa_cpa_mean
        ),
        (his.tcpa_cpa_mean - 1.0).abs() < (stage1.tcpa_cpa_mean - 1.0).abs(),
    );
    c.check(
        format!(
            "(c) memoryless score {:.2} > his_rtg {:.2}",
            stage1.score_precost_mean, his.score_precost_mean
        ),
        stage1.score_precost_mean > his.score_precost_mean,
    );
    c.finish();
}

#[test]
fn criterion_8_persistence() {
    let _g = lock();
    let mut c = Criterion::new("8", 5);
    let dir = tempfile::tempdir().unwrap();

    let model = Model::new(
        ModelConfig {
            embed_dim: 16,
            ..Default::default()
        },
        3,
    )
    .unwrap()
    .randomized(9, 1.0);
    let ckpt = Checkpoint {
        model,
        meta: CheckpointMeta {
            stage: Stage::Dpo,
            rtg: RtgVariant::Historical,
            rtg_scale: 1234.5678,
            max_episode_return: 0.1 + 0.2,
            best_loss: Some(1e-7),
            seed: 42,
        },
    };
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(&ckpt.model.config)).unwrap();
    let same_bits = ckpt
        .model
        .tensors
        .iter()
        .zip(&back.model.tensors)
        .all(|(a, b)| bits(&a.data) == bits(&b.data));
    c.check("checkpoint round-trip is bitwise", same_bits && back.meta == ckpt.meta && back.to_bytes() == ckpt.to_bytes());

    let ds = generate_dataset(&EnvConfig::default(), &ControllerConfig::default(), &dataset_seeds(3, 3), 1).unwrap();
    ds.save(dir.path()).unwrap();
    c.check("dataset round-trip parses equal", Dataset::load(dir.path()).unwrap() == ds);

    let mut config = Config::default();
    config.workers = Some(2);
    config.train.lr = 0.1 + 0.2;
    config.env.tcpa = 1.0 / 3.0;
    let text = config.to_toml();
    let parsed = Config::from_toml(&text, "x.toml".as_ref()).unwrap();
    c.check("config round-trip is idempotent", parsed == config && parsed.to_toml() == text);
    c.finish();
}
