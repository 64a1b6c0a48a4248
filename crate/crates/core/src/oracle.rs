//! Exact small-instance solvers for the hindsight problems.
//!
//! With values pre-scaled by the cost target, the bid-only problem is
//!
//! ```text
//! max  sum x_i v_i
//! s.t. sum x_i c_i <= B
//!      sum x_i c_i <= sum x_i v_i
//!      x_i in {0, 1}
//! ```
//!
//! and the joint problem adds free per-win pricing corrections `y` that must
//! repay a known deficit `bal`: `sum x_i y_i + bal = 0` with the budget
//! constraint applying to `c + y`. Both are solved by enumerating every
//! selection, which is exact for the sizes used here (at most 24 items).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest instance the enumeration solvers accept.
pub const MAX_ITEMS: usize = 24;

/// Feasibility tolerance on double-precision sums.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub v: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInstance {
    pub items: Vec<Item>,
    pub budget: f64,
    pub bal: f64,
}

impl OracleInstance {
    fn check(&self) -> Result<()> {
        if self.items.len() > MAX_ITEMS {
            return Err(Error::InstanceTooLarge {
                n: self.items.len(),
                max: MAX_ITEMS,
            });
        }
        Ok(())
    }

    pub fn with_budget(&self, budget: f64) -> Self {
        Self {
            budget,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub objective: f64,
    /// Bit `i` set means item `i` is selected.
    pub selection: Vec<bool>,
    pub feasible: bool,
    /// Equal-split per-win correction, for the joint problem.
    pub pricing: Option<f64>,
}

impl OptResult {
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.selection
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }

    pub fn count(&self) -> usize {
        self.selection.iter().filter(|&&s| s).count()
    }
}

#[derive(Clone, Copy)]
struct Totals {
    v: f64,
    c: f64,
    n: usize,
}

/// Item `i` maps to bit `n - 1 - i`, so ascending masks visit selections in
/// lexicographic order of the vector `(x_0, x_1, ...)`.
fn totals(items: &[Item], mask: u32) -> Totals {
    let n = items.len();
    let mut t = Totals { v: 0.0, c: 0.0, n: 0 };
    for (i, item) in items.iter().enumerate() {
        if mask >> (n - 1 - i) & 1 == 1 {
            t.v += item.v;
            t.c += item.c;
            t.n += 1;
        }
    }
    t
}

fn selection_of(n: usize, mask: u32) -> Vec<bool> {
    (0..n).map(|i| mask >> (n - 1 - i) & 1 == 1).collect()
}

/// Maximises total value over selections accepted by `feasible`. Ties keep
/// the lexicographically smallest selection.
fn enumerate(items: &[Item], feasible: impl Fn(&Totals) -> bool) -> Option<(u32, f64)> {
    let n = items.len();
    let mut best: Option<(u32, f64)> = None;
    for mask in 0u32..(1u32 << n) {
        let t = totals(items, mask);
        if !feasible(&t) {
            continue;
        }
        if best.is_none_or(|(_, obj)| t.v > obj) {
            best = Some((mask, t.v));
        }
    }
    best
}

/// Exact optimum of the bid-only problem.
pub fn solve_original(instance: &OracleInstance) -> Result<OptResult> {
    instance.check()?;
    let budget = instance.budget;
    let n = instance.items.len();
    // the empty selection is always feasible
    let (mask, objective) = enumerate(&instance.items, |t| {
        t.c <= budget + FEAS_TOL && t.c <= t.v + FEAS_TOL
    })
    .expect("empty selection is feasible");
    Ok(OptResult {
        objective,
        selection: selection_of(n, mask),
        feasible: true,
        pricing: None,
    })
}

/// Exact optimum of the joint bidding-and-pricing problem.
///
/// The correction variables are eliminated: a selection is feasible iff some
/// `y` satisfies the repayment and budget constraints, and only `sum x y`
/// enters those, so the equal split `y = -bal / |x|` is a witness whenever
/// one exists. An empty selection cannot repay a positive deficit.
pub fn solve_joint(instance: &OracleInstance) -> Result<OptResult> {
    instance.check()?;
    let n = instance.items.len();
    let (budget, bal) = (instance.budget, instance.bal);
    let best = enumerate(&instance.items, |t| {
        if t.n == 0 && bal > 0.0 {
            return false;
        }
        let y_total = -bal;
        t.c + y_total <= budget + FEAS_TOL && t.c <= t.v + FEAS_TOL
    });
    Ok(match best {
        Some((mask, objective)) => {
            let selection = selection_of(n, mask);
            let count = selection.iter().filter(|&&s| s).count();
            OptResult {
                objective,
                selection,
                feasible: true,
                pricing: Some(if count == 0 { 0.0 } else { -bal / count as f64 }),
            }
        }
        None => OptResult {
            objective: 0.0,
            selection: vec![false; n],
            feasible: false,
            pricing: None,
        },
    })
}

/// Bid-only problem under the tightened constraints that hold when the
/// deficit must be absorbed by value alone: `sum x c <= B` and
/// `sum x v >= sum x c + bal`. Infeasible instances report objective 0.
pub fn solve_tightened(instance: &OracleInstance) -> Result<OptResult> {
    instance.check()?;
    let n = instance.items.len();
    let (budget, bal) = (instance.budget, instance.bal);
    let best = enumerate(&instance.items, |t| {
        t.c <= budget + FEAS_TOL && t.v + FEAS_TOL >= t.c + bal
    });
    Ok(match best {
        Some((mask, objective)) => OptResult {
            objective,
            selection: selection_of(n, mask),
            feasible: true,
            pricing: None,
        },
        None => OptResult {
            objective: 0.0,
            selection: vec![false; n],
            feasible: false,
            pricing: None,
        },
    })
}

/// Optimal bid under one budget multiplier and one cost-target multiplier;
/// the cost-target coefficient is the value itself after scaling.
pub fn lagrangian_bid(v: f64, lambda0: f64, lambda1: f64) -> f64 {
    (lambda0 + lambda1) * v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub equal_optima: bool,
    pub pricing_feasible: bool,
    pub corollary_holds: bool,
}

impl TheoremReport {
    pub fn all(&self) -> bool {
        self.equal_optima && self.pricing_feasible && self.corollary_holds
    }
}

/// Checks the reduction of the joint problem to a bid-only problem with the
/// budget raised by `bal`, the feasibility of the equal-split pricing, and
/// the ordering of the optimal values against the tightened bid-only problem.
pub fn verify_theorem1(instance: &OracleInstance) -> Result<TheoremReport> {
    let joint = solve_joint(instance)?;
    let relaxed = solve_original(&instance.with_budget(instance.budget + instance.bal))?;
    let tightened = solve_tightened(instance)?;

    let equal_optima = joint.objective == relaxed.objective;

    let pricing_feasible = if joint.feasible {
        let y = joint.pricing.unwrap_or(0.0);
        let repaid: f64 = joint.selected().map(|_| y).sum::<f64>() + instance.bal;
        let paid: f64 = joint
            .selected()
            .map(|i| instance.items[i].c + y)
            .sum::<f64>();
        repaid.abs() <= FEAS_TOL && paid <= instance.budget + FEAS_TOL
    } else {
        // only an empty optimum with a positive deficit is infeasible, and
        // then the relaxed problem must also select nothing of value
        relaxed.objective == 0.0
    };

    let corollary_holds = tightened.objective <= joint.objective;

    Ok(TheoremReport {
        equal_optima,
        pricing_feasible,
        corollary_holds,
    })
}

/// Random instance for verification sweeps.
pub fn random_instance(seed: u64, index: u64, n: usize) -> OracleInstance {
    let mut r = rng::stream(seed, rng::ORACLE_STREAM + index);
    let items = (0..n)
        .map(|_| Item {
            v: r.random_range(0.0..5.0),
            c: r.random_range(0.0..5.0),
        })
        .collect::<Vec<_>>();
    let budget = r.random_range(0.5..(2.0 * n as f64).max(1.0));
    let bal = if r.random_bool(0.2) {
        0.0
    } else {
        r.random_range(0.0..5.0)
    };
    OracleInstance { items, budget, bal }
}
