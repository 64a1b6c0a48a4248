//! Dual-stream return-conditioned transformer with gated cross-attention
//! from the bidding stream into the pricing stream.
//!
//! Each stream embeds a window of steps as interleaved (return, state,
//! action) tokens and predicts its action at the state token. The pricing
//! stream runs twice: a plain pass whose state-token hiddens query the
//! gated bidding hiddens, and a second pass in which each state token is
//! replaced by its enhanced embedding. The second pass is evaluated for all
//! positions at once: plain tokens keep their first-pass keys and values,
//! and each enhanced token attends to the plain tokens before it and to
//! itself.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Mat, Tape, Var};
use crate::domain::{BID_FEATURES, PRICE_FEATURES};
use crate::error::{Error, Result};
use crate::rng;
use crate::trajgen::TrajRecord;

/// Where the cross-attention keys and values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcaWiring {
    /// Keys and values from the gated bidding sequence up to the step.
    GatedBidding,
    /// Keys and values from the pricing hidden of the step itself, which
    /// collapses the attention to a single key.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context window in steps.
    pub context: usize,
    pub bid_features: usize,
    pub price_features: usize,
    /// Size of the timestep embedding table; later steps share the last row.
    pub max_timestep: usize,
    pub init_scale: f64,
    pub use_gca: bool,
    pub gca_wiring: GcaWiring,
    /// No blocks and no normalisation: every output is linear in each
    /// parameter. Used to validate the gradient harness.
    pub linear_only: bool,
    pub a_max: f64,
    pub p_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 2,
            context: 20,
            bid_features: BID_FEATURES,
            price_features: PRICE_FEATURES,
            max_timestep: 48,
            init_scale: 1.0,
            use_gca: true,
            gca_wiring: GcaWiring::GatedBidding,
            linear_only: false,
            a_max: 4.0,
            p_max: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn linear_toy() -> Self {
        Self {
            embed_dim: 8,
            layers: 0,
            heads: 1,
            context: 4,
            use_gca: false,
            linear_only: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("model.{key}"), msg))
            }
        };
        check(self.embed_dim > 0, "embed_dim", "must be positive")?;
        check(self.heads > 0, "heads", "must be positive")?;
        check(
            self.embed_dim % self.heads == 0,
            "heads",
            &format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads),
        )?;
        check(self.context >= 1, "context", "must be at least 1")?;
        check(self.bid_features > 0, "bid_features", "must be positive")?;
        check(self.price_features > 0, "price_features", "must be positive")?;
        check(self.max_timestep > 0, "max_timestep", "must be positive")?;
        check(
            self.init_scale.is_finite() && self.init_scale > 0.0,
            "init_scale",
            "must be positive and finite",
        )?;
        check(self.a_max.is_finite() && self.a_max > 0.0, "a_max", "must be positive and finite")?;
        check(self.p_max.is_finite() && self.p_max >= 0.0, "p_max", "must be non-negative and finite")?;
        if self.linear_only {
            check(self.layers == 0, "layers", "must be 0 when linear_only is set")?;
            check(!self.use_gca, "use_gca", "must be false when linear_only is set")?;
        }
        Ok(())
    }
}

/// Which bidding return the model is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtgVariant {
    Memoryless,
    Historical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Bid,
    Price,
}

/// One window of consecutive steps, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub timesteps: Vec<usize>,
    /// Bidding return input, already scaled.
    pub rtg_b: Vec<f64>,
    pub rtg_p: Vec<f64>,
    pub s_bid: Mat,
    pub s_price: Mat,
    /// Actions taken at each step; they are also the regression targets.
    pub a_b: Vec<f64>,
    pub a_p: Vec<f64>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Builds a window from consecutive records of one episode, keeping only
    /// steps whose `valid` flag is set.
    pub fn from_records(records: &[TrajRecord], valid: &[bool], variant: RtgVariant, rtg_scale: f64) -> Self {
        assert_eq!(records.len(), valid.len());
        let kept: Vec<&TrajRecord> = records.iter().zip(valid).filter(|(_, &v)| v).map(|(r, _)| r).collect();
        let fb = kept.first().map_or(BID_FEATURES, |r| r.s_bid.len());
        let fp = kept.first().map_or(PRICE_FEATURES, |r| r.s_price.len());
        Self {
            timesteps: kept.iter().map(|r| r.t).collect(),
            rtg_b: kept
                .iter()
                .map(|r| match variant {
                    RtgVariant::Memoryless => r.r_b,
                    RtgVariant::Historical => r.r_b_his,
                } / rtg_scale)
                .collect(),
            rtg_p: kept.iter().map(|r| r.r_p).collect(),
            s_bid: Mat::from_vec(kept.len(), fb, kept.iter().flat_map(|r| r.s_bid.iter().copied()).collect()),
            s_price: Mat::from_vec(kept.len(), fp, kept.iter().flat_map(|r| r.s_price.iter().copied()).collect()),
            a_b: kept.iter().map(|r| r.a_b).collect(),
            a_p: kept.iter().map(|r| r.a_p).collect(),
        }
    }

    /// The first `n` steps.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            timesteps: self.timesteps[..n].to_vec(),
            rtg_b: self.rtg_b[..n].to_vec(),
            rtg_p: self.rtg_p[..n].to_vec(),
            s_bid: Mat::from_vec(n, self.s_bid.cols, self.s_bid.data[..n * self.s_bid.cols].to_vec()),
            s_price: Mat::from_vec(n, self.s_price.cols, self.s_price.data[..n * self.s_price.cols].to_vec()),
            a_b: self.a_b[..n].to_vec(),
            a_p: self.a_p[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct StreamIds {
    rtg_w: usize,
    rtg_b: usize,
    state_w: usize,
    state_b: usize,
    act_w: usize,
    act_b: usize,
    time: usize,
    layers: Vec<LayerIds>,
    final_ln: Option<(usize, usize)>,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct GcaIds {
    gate_w: usize,
    gate_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    enhance: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    bid: StreamIds,
    price: StreamIds,
    gca: Option<GcaIds>,
}

enum Init {
    FanIn,
    Zeros,
    Ones,
    Uniform(f64),
}

struct Builder<'a, R: Rng> {
    names: Vec<String>,
    tensors: Vec<Mat>,
    rng: &'a mut R,
    scale: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let bound = match init {
            Init::FanIn => self.scale / (rows as f64).sqrt(),
            Init::Uniform(b) => b * self.scale,
            Init::Zeros | Init::Ones => 0.0,
        };
        let data = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            _ => (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        self.names.push(name);
        self.tensors.push(Mat::from_vec(rows, cols, data));
        self.tensors.len() - 1
    }

    fn stream(&mut self, cfg: &ModelConfig, prefix: &str, features: usize) -> StreamIds {
        let d = cfg.embed_dim;
        let p = |s: &str| format!("{prefix}.{s}");
        let rtg_w = self.add(p("embed_rtg.w"), 1, d, Init::FanIn);
        let rtg_b = self.add(p("embed_rtg.b"), 1, d, Init::Zeros);
        let state_w = self.add(p("embed_state.w"), features, d, Init::FanIn);
        let state_b = self.add(p("embed_state.b"), 1, d, Init::Zeros);
        let act_w = self.add(p("embed_action.w"), 1, d, Init::FanIn);
        let act_b = self.add(p("embed_action.b"), 1, d, Init::Zeros);
        let time = self.add(p("embed_time"), cfg.max_timestep, d, Init::Uniform(1.0 / (d as f64).sqrt()));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let q = |s: &str| format!("{prefix}.layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: self.add(q("ln1.g"), 1, d, Init::Ones),
                ln1_b: self.add(q("ln1.b"), 1, d, Init::Zeros),
                wq: self.add(q("attn.wq"), d, d, Init::FanIn),
                bq: self.add(q("attn.bq"), 1, d, Init::Zeros),
                wk: self.add(q("attn.wk"), d, d, Init::FanIn),
                bk: self.add(q("attn.bk"), 1, d, Init::Zeros),
                wv: self.add(q("attn.wv"), d, d, Init::FanIn),
                bv: self.add(q("attn.bv"), 1, d, Init::Zeros),
                wo: self.add(q("attn.wo"), d, d, Init::FanIn),
                bo: self.add(q("attn.bo"), 1, d, Init::Zeros),
                ln2_g: self.add(q("ln2.g"), 1, d, Init::Ones),
                ln2_b: self.add(q("ln2.b"), 1, d, Init::Zeros),
                w1: self.add(q("mlp.w1"), d, 4 * d, Init::FanIn),
                b1: self.add(q("mlp.b1"), 1, 4 * d, Init::Zeros),
                w2: self.add(q("mlp.w2"), 4 * d, d, Init::FanIn),
                b2: self.add(q("mlp.b2"), 1, d, Init::Zeros),
            });
        }
        let final_ln = (!cfg.linear_only).then(|| {
            (
                self.add(p("ln_f.g"), 1, d, Init::Ones),
                self.add(p("ln_f.b"), 1, d, Init::Zeros),
            )
        });
        let head_w = self.add(p("head.w"), d, 1, Init::Zeros);
        let head_b = self.add(p("head.b"), 1, 1, Init::Zeros);
        StreamIds {
            rtg_w,
            rtg_b,
            state_w,
            state_b,
            act_w,
            act_b,
            time,
            layers,
            final_ln,
            head_w,
            head_b,
        }
    }
}

fn build(cfg: &ModelConfig, rng: &mut impl Rng) -> (Vec<String>, Vec<Mat>, Layout) {
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
        scale: cfg.init_scale,
    };
    let bid = b.stream(cfg, "bid", cfg.bid_features);
    let price = b.stream(cfg, "price", cfg.price_features);
    let gca = cfg.use_gca.then(|| {
        let d = cfg.embed_dim;
        GcaIds {
            gate_w: b.add("gca.gate.w".into(), d, d, Init::FanIn),
            gate_b: b.add("gca.gate.b".into(), 1, d, Init::Zeros),
            wq: b.add("gca.wq".into(), 2 * d, d, Init::FanIn),
            wk: b.add("gca.wk".into(), d, d, Init::FanIn),
            wv: b.add("gca.wv".into(), d, d, Init::FanIn),
            enhance: b.add("gca.enhance".into(), d, d, Init::FanIn),
        }
    });
    (b.names, b.tensors, Layout { bid, price, gca })
}

/// Named parameter tensors plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
    layout: Layout,
    index: HashMap<String, usize>,
}

/// Output handles of one forward pass: per-step raw predictions, `n x 1`.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub bid: Var,
    pub price: Var,
}

struct StreamPass {
    /// Token embeddings, `3n x d`.
    tokens: Var,
    /// Per-layer keys and values over all tokens.
    kv: Vec<(Var, Var)>,
    /// Final-normalised hiddens at the state tokens, `n x d`.
    states: Var,
}

fn state_positions(n: usize) -> Vec<usize> {
    (0..n).map(|i| 3 * i + 1).collect()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::INIT_STREAM);
        let (names, tensors, layout) = build(&config, &mut r);
        Ok(Self::assemble(config, names, tensors, layout))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Mat>, layout: Layout) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            tensors,
            layout,
            index,
        }
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against what `config` implies.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Mat)>) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(0, rng::INIT_STREAM);
        let (names, fresh, layout) = build(&config, &mut r);
        if named.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, config implies {}",
                named.len(),
                names.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for ((expected, shape), (name, m)) in names.iter().zip(&fresh).zip(named) {
            if *expected != name {
                return Err(Error::Checkpoint(format!("tensor `{name}` where `{expected}` was expected")));
            }
            if m.shape() != shape.shape() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape.shape(),
                    found: m.shape(),
                });
            }
            tensors.push(m);
        }
        Ok(Self::assemble(config, names, tensors, layout))
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// True for tensors that only influence the bidding output.
    pub fn is_bid_param(&self, index: usize) -> bool {
        self.names[index].starts_with("bid.")
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter tensor `{name}`")));
            }
        }
        Ok(())
    }

    fn ids(&self, stream: Stream) -> &StreamIds {
        match stream {
            Stream::Bid => &self.layout.bid,
            Stream::Price => &self.layout.price,
        }
    }

    /// Interleaved (return, state, action) tokens with timestep embeddings,
    /// `3n x d`.
    pub fn embed_stream(&self, tape: &mut Tape<'_>, window: &Window, stream: Stream) -> Var {
        let ids = self.ids(stream);
        let n = window.len();
        let (rtg, states, actions) = match stream {
            Stream::Bid => (&window.rtg_b, &window.s_bid, &window.a_b),
            Stream::Price => (&window.rtg_p, &window.s_price, &window.a_p),
        };
        let affine = |tape: &mut Tape<'_>, x: Mat, w: usize, b: usize| {
            let x = tape.constant(x);
            let w = tape.param(w);
            let b = tape.param(b);
            let xw = tape.matmul(x, w);
            tape.add_row(xw, b)
        };
        let r = affine(tape, Mat::from_vec(n, 1, rtg.clone()), ids.rtg_w, ids.rtg_b);
        let s = affine(tape, states.clone(), ids.state_w, ids.state_b);
        let a = affine(tape, Mat::from_vec(n, 1, actions.clone()), ids.act_w, ids.act_b);
        let table = tape.param(ids.time);
        let steps: Vec<usize> = window
            .timesteps
            .iter()
            .map(|&t| t.min(self.config.max_timestep - 1))
            .collect();
        let time = tape.rows(table, &steps);
        let r = tape.add(r, time);
        let s = tape.add(s, time);
        let a = tape.add(a, time);
        let stacked = tape.vstack(&[r, s, a]);
        let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i, 2 * n + i]).collect();
        tape.rows(stacked, &order)
    }

    fn attend(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var, mask: &Rc<Mask>) -> Var {
        let heads = self.config.heads;
        let dh = self.config.embed_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.cols(q, h * dh, dh), tape.cols(k, h * dh, dh), tape.cols(v, h * dh, dh))
            };
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_masked(scores, mask.clone());
            outs.push(tape.matmul(p, vh));
        }
        if heads == 1 {
            outs[0]
        } else {
            tape.hconcat(&outs)
        }
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, w: usize, b: usize) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var, g: usize, b: usize) -> Var {
        let g = tape.param(g);
        let b = tape.param(b);
        tape.layer_norm(x, g, b)
    }

    fn mlp(&self, tape: &mut Tape<'_>, x: Var, l: &LayerIds) -> Var {
        let h = self.layer_norm(tape, x, l.ln2_g, l.ln2_b);
        let h = self.linear(tape, h, l.w1, l.b1);
        let h = tape.gelu(h);
        let h = self.linear(tape, h, l.w2, l.b2);
        tape.add(x, h)
    }

    /// Projects queries, keys and values for a block's attention.
    fn qkv(&self, tape: &mut Tape<'_>, x: Var, l: &LayerIds) -> (Var, Var, Var) {
        let h = self.layer_norm(tape, x, l.ln1_g, l.ln1_b);
        (
            self.linear(tape, h, l.wq, l.bq),
            self.linear(tape, h, l.wk, l.bk),
            self.linear(tape, h, l.wv, l.bv),
        )
    }

    fn final_states(&self, tape: &mut Tape<'_>, x: Var, ids: &StreamIds) -> Var {
        match ids.final_ln {
            Some((g, b)) => self.layer_norm(tape, x, g, b),
            None => x,
        }
    }

    fn stream_pass(&self, tape: &mut Tape<'_>, window: &Window, stream: Stream) -> StreamPass {
        let ids = self.ids(stream);
        let n = window.len();
        let tokens = self.embed_stream(tape, window, stream);
        let mask = Rc::new(Mask::causal(3 * n));
        let mut x = tokens;
        let mut kv = Vec::with_capacity(ids.layers.len());
        for l in &ids.layers {
            let (q, k, v) = self.qkv(tape, x, l);
            let a = self.attend(tape, q, k, v, &mask);
            let o = self.linear(tape, a, l.wo, l.bo);
            let x1 = tape.add(x, o);
            x = self.mlp(tape, x1, l);
            kv.push((k, v));
        }
        let at_states = tape.rows(x, &state_positions(n));
        let states = self.final_states(tape, at_states, ids);
        StreamPass { tokens, kv, states }
    }

    fn head(&self, tape: &mut Tape<'_>, h: Var, ids: &StreamIds) -> Var {
        self.linear(tape, h, ids.head_w, ids.head_b)
    }

    /// Raw per-step predictions for every position of the window.
    pub fn forward(&self, tape: &mut Tape<'_>, window: &Window) -> Outputs {
        assert!(!window.is_empty(), "forward on an empty window");
        let n = window.len();
        let bid = self.stream_pass(tape, window, Stream::Bid);
        let a_b = self.head(tape, bid.states, &self.layout.bid);

        let price = self.stream_pass(tape, window, Stream::Price);
        let ids = &self.layout.price;
        let Some(g) = &self.layout.gca else {
            let a_p = self.head(tape, price.states, ids);
            return Outputs { bid: a_b, price: a_p };
        };

        // gate the bidding hiddens and attend from the pricing side
        let gate = self.linear(tape, bid.states, g.gate_w, g.gate_b);
        let gate = tape.sigmoid(gate);
        let gated = tape.mul(gate, bid.states);
        let query_in = tape.hconcat(&[price.states, gated]);
        let wq = tape.param(g.wq);
        let q = tape.matmul(query_in, wq);
        let (source, mask) = match self.config.gca_wiring {
            GcaWiring::GatedBidding => (gated, Mask::causal(n)),
            GcaWiring::Literal => (price.states, Mask::new(n, n, |r, c| r == c)),
        };
        let wk = tape.param(g.wk);
        let wv = tape.param(g.wv);
        let k = tape.matmul(source, wk);
        let v = tape.matmul(source, wv);
        let d = self.config.embed_dim as f64;
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        let p = tape.softmax_masked(scores, Rc::new(mask));
        let context = tape.matmul(p, v);
        let we = tape.param(g.enhance);
        let delta = tape.matmul(context, we);
        let plain = tape.rows(price.tokens, &state_positions(n));
        let mut xe = tape.add(plain, delta);

        // second pass: enhanced token i sees plain tokens before it and itself
        let mask2 = Rc::new(Mask::new(n, 4 * n, |i, j| {
            if j < 3 * n {
                j < 3 * i + 1
            } else {
                j - 3 * n == i
            }
        }));
        for (l, &(k_plain, v_plain)) in ids.layers.iter().zip(&price.kv) {
            let (qe, ke, ve) = self.qkv(tape, xe, l);
            let k_all = tape.vstack(&[k_plain, ke]);
            let v_all = tape.vstack(&[v_plain, ve]);
            let a = self.attend(tape, qe, k_all, v_all, &mask2);
            let o = self.linear(tape, a, l.wo, l.bo);
            let x1 = tape.add(xe, o);
            xe = self.mlp(tape, x1, l);
        }
        let h = self.final_states(tape, xe, ids);
        let a_p = self.head(tape, h, ids);
        Outputs { bid: a_b, price: a_p }
    }

    /// Raw predictions for all steps of the window.
    pub fn predict(&self, window: &Window) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(&self.tensors);
        let out = self.forward(&mut tape, window);
        (tape.value(out.bid).data.clone(), tape.value(out.price).data.clone())
    }

    /// Actions for the last step of the window, clamped to the bounds.
    pub fn forward_joint(&self, window: &Window) -> Result<(f64, f64)> {
        self.check_finite()?;
        let (b, p) = self.predict(window);
        let (a_b, a_p) = (*b.last().expect("non-empty window"), *p.last().expect("non-empty window"));
        if !a_b.is_finite() || !a_p.is_finite() {
            return Err(Error::NonFinite(format!("model output ({a_b}, {a_p})")));
        }
        Ok((
            a_b.clamp(0.0, self.config.a_max),
            a_p.clamp(-self.config.p_max, self.config.p_max),
        ))
    }

    /// Copies the model with every tensor redrawn uniformly in
    /// `[-scale, scale]`; heads and enhancement included.
    pub fn randomized(&self, seed: u64, scale: f64) -> Self {
        let mut r = rng::stream(seed, rng::GRAD_CHECK_STREAM);
        let mut m = self.clone();
        for t in &mut m.tensors {
            for v in &mut t.data {
                *v = r.random_range(-scale..=scale);
            }
        }
        m
    }
}
