//! Exit criterion and the budget → thresholds calibration.
//!
//! A sample reaching a checkpoint exits with constant probability `q`, which
//! gives the truncated geometric exit distribution
//! `q_k = z (1 - q)^(k - 1) q` over the `K` checkpoints (1-based `k`). For a
//! cost table `G` the expected cost `Σ q_k G_k` is solved for `q` against an
//! average budget `Q`, and per-checkpoint thresholds are then chosen so that
//! about `D q_k` calibration samples exit at checkpoint `k`.
//!
//! Over `q ∈ (0, 1]` the expected cost only spans `[G_1, mean(G)]`. Budgets
//! above `mean(G)` are reached by continuing the same family with `q ≤ 0`,
//! i.e. a growth ratio `1 - q ≥ 1` that shifts mass towards late checkpoints.
//! [`solve_q`] reports which regime a solution lies in.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, precondition_err, Error, Result};

/// Largest growth ratio `1 - q` the solver will use. At this ratio all but
/// about `1e-12` of the mass sits on the final checkpoint.
pub const MAX_RATIO: f64 = 1e12;

/// Exit probabilities `q_k` (index `k - 1`) for a constant per-checkpoint
/// exit probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitModel {
    pub q: f64,
    /// Normaliser `z`; infinite when `q == 0`.
    pub z: f64,
    pub probs: Vec<f64>,
}

impl ExitModel {
    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// The same geometric family for any `q ≤ 1`, computed from the ratio
    /// `r = 1 - q` so that `q ≤ 0` (mass growing towards the last checkpoint)
    /// stays finite. Agrees with [`exit_distribution`] on `(0, 1]`.
    pub fn from_q_extended(q: f64, k: usize) -> Result<Self> {
        if !q.is_finite() || q > 1.0 || 1.0 - q > MAX_RATIO * (1.0 + 1e-9) {
            return Err(Error::Domain(alloc::format!("q = {q} outside [1 - {MAX_RATIO:e}, 1]")));
        }
        if k == 0 {
            return Err(precondition_err!("exit distribution needs K >= 1"));
        }
        if q > 0.0 {
            return exit_distribution(q, k);
        }
        let r = 1.0 - q;
        // weights r^(k-1), rescaled by r^-(K-1) to stay in range
        let s = 1.0 / r;
        let w: Vec<f64> = (0..k).map(|i| libm::pow(s, (k - 1 - i) as f64)).collect();
        let total: f64 = w.iter().sum();
        let probs = w.iter().map(|x| x / total).collect();
        let z = if q == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (0..k).map(|i| libm::pow(r, i as f64) * q).sum::<f64>()
        };
        Ok(Self { q, z, probs })
    }
}

/// `q_k = z (1 - q)^(k - 1) q` with `z = 1 / Σ_k (1 - q)^(k - 1) q`.
pub fn exit_distribution(q: f64, k: usize) -> Result<ExitModel> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(alloc::format!("exit probability q = {q} outside (0, 1]")));
    }
    if k == 0 {
        return Err(precondition_err!("exit distribution needs K >= 1"));
    }
    let raw: Vec<f64> = (0..k).map(|i| libm::pow(1.0 - q, i as f64) * q).collect();
    let z = 1.0 / raw.iter().sum::<f64>();
    let probs = raw.iter().map(|p| z * p).collect();
    Ok(ExitModel { q, z, probs })
}

/// `Σ_k q_k G_k`.
pub fn expected_cost(model: &ExitModel, costs: &[f64]) -> Result<f64> {
    if costs.len() != model.k() {
        return Err(config_err!("{} costs for {} checkpoints", costs.len(), model.k()));
    }
    Ok(model.probs.iter().zip(costs).map(|(p, g)| p * g).sum())
}

/// Which part of the exit family a solved `q` lies in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `q ∈ (0, 1]`: a proper per-checkpoint exit probability.
    ExitProbability,
    /// `q ≤ 0`: budget above `mean(G)`, mass grows towards late checkpoints.
    Extended,
    /// Budget at or above `G_K`: the smallest `q` is returned and nearly all
    /// samples run to the final checkpoint.
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QSolution {
    pub q: f64,
    pub regime: Regime,
}

impl QSolution {
    /// Set when the budget could not be matched exactly.
    pub fn warning(&self) -> bool {
        self.regime == Regime::Saturated
    }
}

fn check_costs(costs: &[f64]) -> Result<()> {
    if costs.is_empty() {
        return Err(precondition_err!("empty cost table"));
    }
    if costs.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(precondition_err!("cost table must be finite and non-negative"));
    }
    if costs.windows(2).any(|w| w[1] < w[0]) {
        return Err(precondition_err!("cost table must be non-decreasing"));
    }
    Ok(())
}

const BISECTION_STEPS: usize = 200;

/// Finds `q` with `expected_cost(q) = Q` by bisection on the monotone
/// expected cost.
pub fn solve_q(budget: f64, costs: &[f64]) -> Result<QSolution> {
    check_costs(costs)?;
    let k = costs.len();
    let (g_first, g_last) = (costs[0], costs[k - 1]);
    if !budget.is_finite() || budget < g_first {
        return Err(Error::InfeasibleBudget { budget, min: g_first, max: g_last });
    }
    if budget >= g_last && g_last > g_first {
        return Ok(QSolution { q: 1.0 - MAX_RATIO, regime: Regime::Saturated });
    }
    if budget == g_first || g_last == g_first {
        return Ok(QSolution { q: 1.0, regime: Regime::ExitProbability });
    }
    // Bisection runs to bracket collapse; the residual then sits far below
    // 1e-9 G_K.
    let cost_at = |q: f64| -> f64 {
        let m = ExitModel::from_q_extended(q, k).expect("q within solver bracket");
        expected_cost(&m, costs).expect("lengths agree")
    };
    let mean = costs.iter().sum::<f64>() / k as f64;

    if budget <= mean {
        // cost(q) decreases from mean(G) at q -> 0 to G_1 at q = 1
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut mid = 0.5;
        for _ in 0..BISECTION_STEPS {
            mid = 0.5 * (lo + hi);
            let c = cost_at(mid.max(f64::MIN_POSITIVE));
            if c == budget || hi - lo <= f64::EPSILON * hi {
                break;
            }
            if c > budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return Ok(QSolution { q: mid.max(f64::MIN_POSITIVE), regime: Regime::ExitProbability });
    }

    // cost increases with t = ln(1 - q) on (0, ln MAX_RATIO]
    let (mut lo, mut hi) = (0.0f64, libm::log(MAX_RATIO));
    let mut q = 0.0;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        q = 1.0 - libm::exp(mid);
        let c = cost_at(q);
        if c == budget || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if c < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(QSolution { q, regime: Regime::Extended })
}

/// Per-checkpoint exit counts `round(D q_k)` (ties to even) for `k < K - 1`,
/// clamped so they never exceed `D`; the final checkpoint takes the rest.
pub fn exit_targets(d: usize, model: &ExitModel) -> Vec<usize> {
    let k = model.k();
    let mut targets = vec![0; k];
    let mut left = d;
    for (t, p) in targets.iter_mut().zip(&model.probs).take(k - 1) {
        let n = libm::rint(d as f64 * p).max(0.0) as usize;
        *t = n.min(left);
        left -= *t;
    }
    targets[k - 1] = left;
    targets
}

/// A D × K matrix of per-checkpoint confidences (max softmax score).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ConfidenceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(config_err!("{rows} x {cols} confidence matrix with {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(config_err!("ragged confidence rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub thresholds: Vec<f64>,
    pub targets: Vec<usize>,
}

/// Sequential quantile thresholds: at each checkpoint, among samples that
/// have not exited yet, the threshold sits midway between the `n_k`-th and
/// `(n_k + 1)`-th largest confidence so that exactly `n_k` of them exit when
/// scores are distinct. `n_k = 0` yields `+inf`; exiting every remaining
/// sample yields `-inf`. The final threshold is always `-inf`.
pub fn calibrate_thresholds(conf: &ConfidenceMatrix, model: &ExitModel) -> Result<Calibration> {
    let (d, k) = (conf.rows, conf.cols);
    if k != model.k() {
        return Err(config_err!("confidence matrix has {k} checkpoints, exit model {}", model.k()));
    }
    if d < k {
        return Err(precondition_err!("calibration needs at least K = {k} samples, got {d}"));
    }
    if let Some((i, &v)) = conf.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { what: "confidence matrix".into(), index: i, value: v });
    }
    let targets = exit_targets(d, model);
    let mut remaining: Vec<usize> = (0..d).collect();
    let mut thresholds = vec![f64::NEG_INFINITY; k];
    for col in 0..k - 1 {
        let n = targets[col];
        let mut scores: Vec<f64> = remaining.iter().map(|&r| conf.get(r, col)).collect();
        scores.sort_unstable_by(|a, b| b.total_cmp(a));
        let t = if n == 0 {
            f64::INFINITY
        } else if n >= scores.len() {
            f64::NEG_INFINITY
        } else {
            0.5 * (scores[n - 1] + scores[n])
        };
        thresholds[col] = t;
        remaining.retain(|&r| !(conf.get(r, col) > t));
    }
    Ok(Calibration { thresholds, targets })
}

/// Exit checkpoint of one sample under `thresholds`.
pub fn exit_point(confidences: &[f64], thresholds: &[f64]) -> usize {
    let last = thresholds.len() - 1;
    (0..last).find(|&k| confidences[k] > thresholds[k]).unwrap_or(last)
}

/// Exit histogram obtained by replaying `thresholds` over the matrix.
pub fn replay(conf: &ConfidenceMatrix, thresholds: &[f64]) -> Vec<usize> {
    let mut hist = vec![0; thresholds.len()];
    for r in 0..conf.rows {
        hist[exit_point(conf.row(r), thresholds)] += 1;
    }
    hist
}

/// Thresholds and costs used at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    pub thresholds: Vec<f64>,
    pub costs: Vec<u64>,
    pub budget: f64,
    pub q: f64,
}

impl ExitPolicy {
    pub fn k(&self) -> usize {
        self.thresholds.len()
    }

    /// Never exits before the final checkpoint.
    pub fn never_exit(costs: Vec<u64>) -> Self {
        let k = costs.len();
        let mut thresholds = vec![f64::INFINITY; k];
        thresholds[k - 1] = f64::NEG_INFINITY;
        let budget = *costs.last().unwrap_or(&0) as f64;
        Self { thresholds, costs, budget, q: 0.0 }
    }

    /// Exits at checkpoint 0 unconditionally.
    pub fn always_first(costs: Vec<u64>) -> Self {
        let k = costs.len();
        let budget = *costs.first().unwrap_or(&0) as f64;
        Self { thresholds: vec![f64::NEG_INFINITY; k], costs, budget, q: 1.0 }
    }

    /// Solves for `q` and calibrates thresholds on `conf`.
    pub fn calibrate(budget: f64, costs: &[u64], conf: &ConfidenceMatrix) -> Result<(Self, QSolution, Vec<usize>)> {
        let g: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
        let sol = solve_q(budget, &g)?;
        let model = ExitModel::from_q_extended(sol.q, g.len())?;
        let cal = calibrate_thresholds(conf, &model)?;
        Ok((Self { thresholds: cal.thresholds, costs: costs.to_vec(), budget, q: sol.q }, sol, cal.targets))
    }
}

/// `max(scores) > T_k`, and always true at the final checkpoint.
pub fn decide_exit(scores: &[f64], k: usize, policy: &ExitPolicy) -> bool {
    if k + 1 >= policy.k() {
        return true;
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top > policy.thresholds[k]
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub policies: Vec<ExitPolicy>,
    /// Budgets that could not be calibrated, with the reason.
    pub skipped: Vec<(f64, Error)>,
}

/// One calibrated policy per budget; infeasible budgets are reported and
/// skipped.
pub fn sweep_budgets(budgets: &[f64], conf: &ConfidenceMatrix, costs: &[u64]) -> SweepOutcome {
    let mut out = SweepOutcome { policies: Vec::new(), skipped: Vec::new() };
    for &b in budgets {
        match ExitPolicy::calibrate(b, costs, conf) {
            Ok((p, _, _)) => out.policies.push(p),
            Err(e) => out.skipped.push((b, e)),
        }
    }
    out
}

/// `count` budgets evenly spaced over `[G_1, G_K]`.
pub fn even_budgets(costs: &[u64], count: usize) -> Vec<f64> {
    let (lo, hi) = (costs[0] as f64, *costs.last().unwrap() as f64);
    match count {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}
