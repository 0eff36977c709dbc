//! Relative value iteration on the joint state space, optimal policy
//! extraction and checks of the structural properties of the solution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{evaluate_average_cost, ChainEvaluation};
use crate::model::{DeviceAction, SystemAction, SystemModel, SystemState};
use crate::TIE_EPS;

/// Sweeps over fewer states than this stay on one thread.
const PARALLEL_MIN_STATES: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Span-seminorm tolerance on successive iterates.
    pub tol: f64,
    pub max_iters: u64,
    /// Weight `t` of the transformed kernel `t P + (1 - t) I`; values below
    /// one make every chain aperiodic without changing the average cost.
    pub aperiodicity: f64,
    /// RVIA reference state; `None` selects the all-fresh state.
    pub reference_state: Option<SystemState>,
    /// Largest joint state space a joint solve may allocate.
    pub max_states: usize,
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-9,
            max_iters: 1_000_000,
            aperiodicity: 0.9,
            reference_state: None,
            max_states: 4_000_000,
            parallel: true,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.aperiodicity > 0.0 && self.aperiodicity <= 1.0) {
            return Err(Error::InvalidConfig("aperiodicity must lie in (0, 1]".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Relative value function with its average cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub theta: f64,
    pub iterations: u64,
    /// Span of the last update.
    pub span: f64,
}

/// Deterministic stationary policy, stored as indices into
/// [`SystemModel::actions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub action_ids: Vec<u32>,
}

impl Policy {
    pub fn uniform(n: usize, action: u32) -> Self {
        Policy { action_ids: vec![action; n] }
    }

    pub fn len(&self) -> usize {
        self.action_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_ids.is_empty()
    }

    pub fn action<'m>(&self, model: &'m SystemModel, state: usize) -> &'m SystemAction {
        &model.actions()[self.action_ids[state] as usize]
    }
}

/// Policy together with the number of states where it was copied from a
/// neighbour instead of re-minimized.
#[derive(Debug, Clone)]
pub struct PropagatedPolicy {
    pub policy: Policy,
    pub skipped: usize,
}

/// Generic RVIA loop shared by every solver in the crate.
///
/// `bellman(x, h)` returns `c(x) + min E[h(next)]` for state `x`. The
/// returned values are relative to `reference` and already undo the
/// aperiodicity transform.
pub(crate) fn relative_value_iteration<F>(
    n: usize,
    reference: usize,
    cfg: &SolverConfig,
    bellman: F,
) -> Result<ValueTable>
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let t = cfg.aperiodicity;
    let mut h = vec![0.0; n];
    let mut next = vec![0.0; n];
    let parallel = cfg.parallel && n >= PARALLEL_MIN_STATES;
    let mut span = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        let update = |(x, out): (usize, &mut f64)| {
            *out = t * bellman(x, &h) + (1.0 - t) * h[x];
        };
        if parallel {
            next.par_iter_mut().enumerate().for_each(update);
        } else {
            next.iter_mut().enumerate().for_each(update);
        }
        let theta = next[reference];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (v, old) in next.iter_mut().zip(&h) {
            *v -= theta;
            let diff = *v - old;
            lo = lo.min(diff);
            hi = hi.max(diff);
        }
        span = hi - lo;
        std::mem::swap(&mut h, &mut next);
        if !span.is_finite() {
            return Err(Error::NonConvergence { iterations: iter, span });
        }
        if span < cfg.tol {
            // The transformed chain has average cost `t * theta` and the same
            // relative values as the original one.
            return Ok(ValueTable { values: h, theta: theta / t, iterations: iter, span });
        }
    }
    Err(Error::NonConvergence { iterations: cfg.max_iters, span })
}

fn reference_index(model: &SystemModel, cfg: &SolverConfig) -> Result<usize> {
    match &cfg.reference_state {
        Some(x) => model.encode(x),
        None => Ok(model.join_index(&model.reference_local())),
    }
}

/// `min_W E[values(next) | local, W]` over feasible joint actions.
#[inline]
fn min_expected(model: &SystemModel, local: &[usize], values: &[f64]) -> f64 {
    model.actions().iter().filter_map(|w| model.expected_value(local, w, values)).fold(f64::INFINITY, f64::min)
}

/// Optimal average cost and relative values by RVIA.
pub fn rvia_solve(model: &SystemModel, cfg: &SolverConfig) -> Result<ValueTable> {
    let n = model.require_joint_states(cfg.max_states)?;
    let reference = reference_index(model, cfg)?;
    relative_value_iteration(n, reference, cfg, |x, h| {
        let local = model.split_index(x);
        model.stage_cost_local(&local) + min_expected(model, &local, h)
    })
}

/// `J(X, W) = c(X) + E[V(X') | X, W]`.
pub fn state_action_cost(model: &SystemModel, x: &SystemState, w: &SystemAction, values: &[f64]) -> Result<f64> {
    let local = model.local_of(x)?;
    match model.expected_value(&local, w, values) {
        Some(e) => Ok(model.stage_cost(x) + e),
        None => Err(Error::InfeasibleAction(format!("{w} in {x:?}"))),
    }
}

/// J-value of action `a` (an index into the model's actions) at a joint
/// state, `None` if infeasible.
#[inline]
pub fn joint_j(model: &SystemModel, local: &[usize], a: usize, values: &[f64]) -> Option<f64> {
    model.expected_value(local, &model.actions()[a], values).map(|e| model.stage_cost_local(local) + e)
}

/// First action in canonical order whose score is within [`TIE_EPS`] of the
/// minimum. Scores of `None` mark infeasible actions.
pub fn tie_broken_argmin(scores: impl Iterator<Item = Option<f64>> + Clone) -> Option<usize> {
    let best = scores.clone().flatten().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    scores.enumerate().find_map(|(i, s)| match s {
        Some(v) if v <= best + TIE_EPS => Some(i),
        _ => None,
    })
}

fn argmin_joint(model: &SystemModel, local: &[usize], values: &[f64]) -> u32 {
    let scores = model.actions().iter().map(|w| model.expected_value(local, w, values));
    // All-idle is always feasible, so some action exists.
    tie_broken_argmin(scores).expect("idle is feasible") as u32
}

/// Greedy policy with respect to `values`, ties to the canonical order.
pub fn extract_policy(model: &SystemModel, values: &ValueTable) -> Result<Policy> {
    let n = model.require_joint_states(usize::MAX)?;
    check_len(n, &values.values)?;
    let action_ids =
        (0..n).into_par_iter().map(|x| argmin_joint(model, &model.split_index(x), &values.values)).collect();
    Ok(Policy { action_ids })
}

fn check_len(n: usize, values: &[f64]) -> Result<()> {
    if values.len() != n {
        return Err(Error::InvalidConfig(format!("value table has {} entries, model has {n} states", values.len())));
    }
    Ok(())
}

/// Builds a policy in ascending index order, copying the action of the
/// state one step lower in `a_d` of device `k` whenever that action samples
/// a fresh update at `k`; `minimize` is only called for the remaining states.
pub fn propagate_fresh_actions(
    model: &SystemModel,
    mut minimize: impl FnMut(usize, &[usize]) -> u32,
) -> Result<PropagatedPolicy> {
    let n = model.require_joint_states(usize::MAX)?;
    let steps: Vec<usize> = (0..model.k()).map(|k| model.strides()[k] * model.device(k).a_d_stride()).collect();
    let mut ids: Vec<u32> = Vec::with_capacity(n);
    let mut skipped = 0;
    for x in 0..n {
        let local = model.split_index(x);
        let copied = (0..model.k()).find_map(|k| {
            if model.device(k).a_d_of(local[k]) == 0 {
                return None;
            }
            let prev = ids[x - steps[k]];
            (model.actions()[prev as usize].0[k] == DeviceAction::Fresh).then_some(prev)
        });
        match copied {
            Some(a) => {
                skipped += 1;
                ids.push(a);
            }
            None => ids.push(minimize(x, &local)),
        }
    }
    Ok(PropagatedPolicy { policy: Policy { action_ids: ids }, skipped })
}

/// [`extract_policy`] with fresh-action propagation along `a_d`.
pub fn structure_aware_extract(model: &SystemModel, values: &ValueTable) -> Result<PropagatedPolicy> {
    check_len(model.require_joint_states(usize::MAX)?, &values.values)?;
    propagate_fresh_actions(model, |_, local| argmin_joint(model, local, &values.values))
}

/// Average cost of a possibly randomized policy from the all-fresh state.
///
/// `law(local, out)` appends `(probability, action id)` pairs.
pub fn evaluate_randomized_policy(
    model: &SystemModel,
    mut law: impl FnMut(&[usize], &mut Vec<(f64, u32)>) -> Result<()>,
) -> Result<ChainEvaluation> {
    model.require_joint_states(usize::MAX)?;
    let start = model.join_index(&model.reference_local());
    let mut choices = Vec::new();
    evaluate_average_cost(
        start,
        |x, out| {
            let local = model.split_index(x);
            choices.clear();
            law(&local, &mut choices)?;
            for &(q, a) in &choices {
                let w = &model.actions()[a as usize];
                if !model.for_each_successor(&local, w, |y, p| out.push((y, q * p))) {
                    return Err(Error::InfeasibleAction(format!("{w} in {:?}", model.decode(x))));
                }
            }
            Ok(())
        },
        |x| model.stage_cost_local(&model.split_index(x)),
    )
}

/// Long-run average cost of a deterministic policy started from the
/// all-fresh state, from the stationary law of its recurrent class.
pub fn exact_policy_evaluation(model: &SystemModel, policy: &Policy) -> Result<f64> {
    let n = model.require_joint_states(usize::MAX)?;
    if policy.len() != n {
        return Err(Error::InvalidConfig(format!("policy has {} entries, model has {n} states", policy.len())));
    }
    let eval = evaluate_randomized_policy(model, |local, out| {
        out.push((1.0, policy.action_ids[model.join_index(local)]));
        Ok(())
    })?;
    Ok(eval.theta)
}

/// `phi` for one reduced state; `None` is the `+inf` sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEntry {
    /// The state with `a_d` of the thresholded device set to 0.
    pub reduced: SystemState,
    pub phi: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct ThresholdMap {
    pub device: usize,
    pub action: SystemAction,
    pub entries: Vec<ThresholdEntry>,
}

/// Thresholds of action `w` in `a_d` of device `k` under an arbitrary
/// J-function (`j(local, action id)`, `None` when infeasible).
pub fn thresholds_with(
    model: &SystemModel,
    k: usize,
    w: &SystemAction,
    tol: f64,
    j: impl Fn(&[usize], usize) -> Option<f64>,
) -> Result<ThresholdMap> {
    if k >= model.k() || w.0.get(k) != Some(&DeviceAction::Fresh) {
        return Err(Error::InfeasibleAction(format!("{w} does not sample a fresh update at device {k}")));
    }
    let target =
        model.action_index(w).ok_or_else(|| Error::InfeasibleAction(format!("{w} is not a feasible joint action")))?;
    let n = model.require_joint_states(usize::MAX)?;
    let dev = model.device(k);
    let step = model.strides()[k] * dev.a_d_stride();
    let cap_d = dev.params().cap_d;
    let mut entries = Vec::new();
    for x in 0..n {
        let local = model.split_index(x);
        if dev.a_d_of(local[k]) != 0 {
            continue;
        }
        let mut phi = None;
        for a_d in 0..=cap_d {
            let y = x + a_d as usize * step;
            let ly = model.split_index(y);
            let Some(jw) = j(&ly, target) else { continue };
            let minimal =
                (0..model.actions().len()).filter(|&b| b != target).all(|b| j(&ly, b).is_none_or(|jb| jw <= jb + tol));
            if minimal {
                phi = Some(a_d);
                break;
            }
        }
        entries.push(ThresholdEntry { reduced: model.decode(x), phi });
    }
    Ok(ThresholdMap { device: k, action: w.clone(), entries })
}

/// Thresholds of `w` for device `k` under the optimal J-function.
pub fn compute_thresholds(
    model: &SystemModel,
    values: &ValueTable,
    k: usize,
    w: &SystemAction,
) -> Result<ThresholdMap> {
    check_len(model.require_joint_states(usize::MAX)?, &values.values)?;
    thresholds_with(model, k, w, TIE_EPS, |local, a| joint_j(model, local, a, &values.values))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub pairs_checked: usize,
    pub violations: usize,
    /// Largest `V(lower) - V(higher)`; positive values are violations.
    pub worst_gap: f64,
}

/// Checks `V(X + e) >= V(X) - tol` for every unit increment `e` of one AoI
/// coordinate (`a_d`, `a_r`, and `a_b` where present) of one device.
///
/// `a_b = 0` marks an empty buffer rather than an age, so the `a_b` step is
/// only checked between non-empty buffers.
pub fn verify_value_monotonicity(model: &SystemModel, values: &[f64], tol: f64) -> Result<MonotonicityReport> {
    let n = model.require_joint_states(usize::MAX)?;
    check_len(n, values)?;
    let mut report = MonotonicityReport { worst_gap: f64::NEG_INFINITY, ..Default::default() };
    for x in 0..n {
        let local = model.split_index(x);
        for (k, dev) in model.devices().iter().enumerate() {
            let s = dev.state(local[k]);
            let p = dev.params();
            let mut coords = vec![(s.a_d < p.cap_d, dev.a_d_stride()), (s.a_r < p.cap_r, dev.a_r_stride())];
            if model.variant() == crate::ModelVariant::RandomArrival {
                coords.push((s.a_b >= 1 && s.a_b < p.cap_b.unwrap_or(0), dev.a_b_stride()));
            }
            for (ok, stride) in coords {
                if !ok {
                    continue;
                }
                let y = x + stride * model.strides()[k];
                let gap = values[x] - values[y];
                report.pairs_checked += 1;
                report.worst_gap = report.worst_gap.max(gap);
                if gap > tol {
                    report.violations += 1;
                }
            }
        }
    }
    if report.pairs_checked == 0 {
        report.worst_gap = 0.0;
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct JInequalityReport {
    pub comparisons: usize,
    pub violations: usize,
    /// Largest excess of the left side over the right side.
    pub worst_excess: f64,
}

/// Dense `J(x, a)` table, NaN where infeasible.
pub fn j_table(model: &SystemModel, j: impl Fn(&[usize], usize) -> Option<f64> + Sync) -> Result<Vec<f64>> {
    let n = model.require_joint_states(usize::MAX)?;
    let na = model.actions().len();
    let mut table = vec![f64::NAN; n * na];
    table.par_chunks_mut(na).enumerate().for_each(|(x, row)| {
        let local = model.split_index(x);
        for (a, slot) in row.iter_mut().enumerate() {
            if let Some(v) = j(&local, a) {
                *slot = v;
            }
        }
    });
    Ok(table)
}

/// Checks `J(X1,W) - J(X1,W') <= J(X2,W) - J(X2,W') + tol` whenever `W`
/// samples fresh at device `k` and `X1` is `X2` with `a_d,k` one higher.
/// Adjacent pairs imply the inequality for any larger gap by telescoping.
pub fn j_inequality_with(
    model: &SystemModel,
    tol: f64,
    j: impl Fn(&[usize], usize) -> Option<f64> + Sync,
) -> Result<JInequalityReport> {
    let table = j_table(model, j)?;
    let na = model.actions().len();
    let n = table.len() / na.max(1);
    let mut report = JInequalityReport { worst_excess: f64::NEG_INFINITY, ..Default::default() };
    for x2 in 0..n {
        let local = model.split_index(x2);
        for k in 0..model.k() {
            let dev = model.device(k);
            if dev.a_d_of(local[k]) >= dev.params().cap_d {
                continue;
            }
            let x1 = x2 + model.strides()[k] * dev.a_d_stride();
            for (a, w) in model.actions().iter().enumerate() {
                if w.0[k] != DeviceAction::Fresh || table[x2 * na + a].is_nan() {
                    continue;
                }
                for b in (0..na).filter(|&b| b != a) {
                    let (j1b, j2b) = (table[x1 * na + b], table[x2 * na + b]);
                    if j1b.is_nan() || j2b.is_nan() {
                        continue;
                    }
                    let lhs = table[x1 * na + a] - j1b;
                    let rhs = table[x2 * na + a] - j2b;
                    let excess = lhs - rhs;
                    report.comparisons += 1;
                    report.worst_excess = report.worst_excess.max(excess);
                    if excess > tol {
                        report.violations += 1;
                    }
                }
            }
        }
    }
    if report.comparisons == 0 {
        report.worst_excess = 0.0;
    }
    Ok(report)
}

/// [`j_inequality_with`] under the optimal J-function.
pub fn verify_j_inequality(model: &SystemModel, values: &ValueTable, tol: f64) -> Result<JInequalityReport> {
    check_len(model.require_joint_states(usize::MAX)?, &values.values)?;
    j_inequality_with(model, tol, |local, a| joint_j(model, local, a, &values.values))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpClosedReport {
    pub checks: usize,
    pub violations: usize,
}

/// For every state whose policy action samples fresh at device `k`, checks
/// that the same action still minimizes J (within `tol`) at every state
/// with larger `a_d,k` and all other components equal.
pub fn fresh_up_closed_with(
    model: &SystemModel,
    policy: &Policy,
    tol: f64,
    j: impl Fn(&[usize], usize) -> Option<f64> + Sync,
) -> Result<UpClosedReport> {
    let table = j_table(model, j)?;
    let na = model.actions().len();
    let mut report = UpClosedReport::default();
    for x in 0..policy.len() {
        let local = model.split_index(x);
        let a = policy.action_ids[x] as usize;
        for k in 0..model.k() {
            if model.actions()[a].0[k] != DeviceAction::Fresh {
                continue;
            }
            let dev = model.device(k);
            let step = model.strides()[k] * dev.a_d_stride();
            for m in 1..=(dev.params().cap_d - dev.a_d_of(local[k])) as usize {
                let y = x + m * step;
                let row = &table[y * na..(y + 1) * na];
                let best = row.iter().filter(|v| !v.is_nan()).fold(f64::INFINITY, |acc, &v| acc.min(v));
                report.checks += 1;
                if row[a].is_nan() || row[a] > best + tol {
                    report.violations += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Counts adjacent `a_d` steps along which a table policy stops sampling
/// fresh at a device (the table-level form of an up-closed fresh region).
pub fn fresh_region_breaks(model: &SystemModel, policy: &Policy) -> usize {
    let mut breaks = 0;
    for x in 0..policy.len() {
        let local = model.split_index(x);
        let w = policy.action(model, x);
        for k in 0..model.k() {
            let dev = model.device(k);
            if w.0[k] == DeviceAction::Fresh && dev.a_d_of(local[k]) < dev.params().cap_d {
                let y = x + model.strides()[k] * dev.a_d_stride();
                if policy.action(model, y).0[k] != DeviceAction::Fresh {
                    breaks += 1;
                }
            }
        }
    }
    breaks
}
