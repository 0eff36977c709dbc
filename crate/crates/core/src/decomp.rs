//! Low-complexity scheduling through per-device value functions.
//!
//! Under a base policy that schedules device `k` with marginal probability
//! `p_k` and lets each scheduled device pick its own sampling action, the
//! joint relative value function is the sum of per-device ones. One step of
//! policy improvement on that sum gives a deterministic policy whose
//! per-state cost only grows with the number of joint actions, not with the
//! joint state space.

use rayon::prelude::*;
use serde::Serialize;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::exact::{
    propagate_fresh_actions, relative_value_iteration, tie_broken_argmin, Policy, PropagatedPolicy, SolverConfig,
};
use crate::model::{DeviceAction, SystemAction, SystemConfig, SystemModel, SystemState};
use crate::TIE_EPS;

/// Up to this many joint actions the improved policy enumerates them all;
/// beyond it the separable structure of the objective is used instead.
pub const ENUMERATION_LIMIT: usize = 4096;

/// Scheduling intervals shorter than this are dropped from the joint law.
const SLIVER: f64 = 1e-12;

/// Proportional-to-reliability scheduling marginals, scaled by `M` and
/// clamped to 1.
pub fn default_base_scheduling(cfg: &SystemConfig) -> Vec<f64> {
    let total: f64 = cfg.devices.iter().map(|d| d.lambda).sum();
    cfg.devices.iter().map(|d| (cfg.m as f64 * d.lambda / total).min(1.0)).collect()
}

/// Relative values of one device under the base policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PerDeviceValueTable {
    pub values: Vec<f64>,
    pub theta: f64,
    /// Sampling action used when the device is scheduled; `Idle` where
    /// neither continue nor fresh is feasible.
    pub sampling: Vec<DeviceAction>,
    pub iterations: u64,
}

impl PerDeviceValueTable {
    /// `E[V_k(x') | x, w]`, `None` if `w` is infeasible at `x`.
    #[inline]
    pub fn expected(&self, dev: &crate::model::DeviceModel, x: usize, w: DeviceAction) -> Option<f64> {
        dev.expectation(x, w, &self.values)
    }
}

fn sampling_choice(dev: &crate::model::DeviceModel, x: usize, h: &[f64]) -> (DeviceAction, Option<f64>) {
    let scores = [dev.expectation(x, DeviceAction::Continue, h), dev.expectation(x, DeviceAction::Fresh, h)];
    match tie_broken_argmin(scores.iter().copied()) {
        Some(0) => (DeviceAction::Continue, scores[0]),
        Some(_) => (DeviceAction::Fresh, scores[1]),
        None => (DeviceAction::Idle, None),
    }
}

/// Solves the per-device Bellman equation of device `k` when it is
/// scheduled with probability `p` and minimizes over its sampling action.
pub fn solve_per_device(model: &SystemModel, k: usize, p: f64, cfg: &SolverConfig) -> Result<PerDeviceValueTable> {
    if k >= model.k() {
        return Err(Error::InvalidConfig(format!("device {k} out of range")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("scheduling probability {p} outside [0, 1]")));
    }
    let dev = model.device(k);
    let reference = dev.reference_index();
    let solved = relative_value_iteration(dev.size(), reference, cfg, |x, h| {
        let idle = dev.expectation(x, DeviceAction::Idle, h).expect("idle is feasible");
        let scheduled = sampling_choice(dev, x, h).1.unwrap_or(idle);
        dev.a_r_of(x) as f64 + p * scheduled + (1.0 - p) * idle
    })?;
    let sampling = (0..dev.size()).map(|x| sampling_choice(dev, x, &solved.values).0).collect();
    Ok(PerDeviceValueTable { values: solved.values, theta: solved.theta, sampling, iterations: solved.iterations })
}

/// Device `k` is selected iff `[S_{k-1}, S_k)` contains a point of `u + Z`,
/// where `S_k` are the cumulative marginals. Each device is selected with
/// probability exactly `p_k` for `u ~ U[0, 1)` and at most `ceil(sum p)`
/// devices are selected.
pub fn systematic_selection(p_u: &[f64], u: f64, limit: usize, out: &mut Vec<usize>) {
    out.clear();
    let mut lo = 0.0;
    for (k, &p) in p_u.iter().enumerate() {
        let hi = lo + p;
        if (hi - u).ceil() - (lo - u).ceil() >= 1.0 && out.len() < limit {
            out.push(k);
        }
        lo = hi;
    }
}

/// Exact joint law of [`systematic_selection`] as `(probability, devices)`.
pub fn scheduling_law(p_u: &[f64], limit: usize) -> Vec<(f64, Vec<usize>)> {
    let mut cuts = vec![0.0, 1.0];
    let mut s = 0.0;
    for &p in p_u {
        s += p;
        cuts.push(s - s.floor());
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut law: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut sel = Vec::new();
    for pair in cuts.windows(2) {
        let len = pair[1] - pair[0];
        if len <= SLIVER {
            continue;
        }
        systematic_selection(p_u, 0.5 * (pair[0] + pair[1]), limit, &mut sel);
        match law.iter_mut().find(|(_, s)| *s == sel) {
            Some(e) => e.0 += len,
            None => law.push((len, sel.clone())),
        }
    }
    let total: f64 = law.iter().map(|e| e.0).sum();
    law.iter_mut().for_each(|e| e.0 /= total);
    law
}

/// Randomized scheduling with deterministic per-device sampling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemiRandomizedBasePolicy {
    pub p_u: Vec<f64>,
    #[serde(skip)]
    pub law: Vec<(f64, Vec<usize>)>,
}

impl SemiRandomizedBasePolicy {
    pub fn new(p_u: Vec<f64>, m: usize) -> Result<Self> {
        if let Some(p) = p_u.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!("scheduling probability {p} outside [0, 1]")));
        }
        let total: f64 = p_u.iter().sum();
        if total > m as f64 + 1e-9 {
            return Err(Error::InvalidConfig(format!("scheduling probabilities sum to {total} > M = {m}")));
        }
        let law = scheduling_law(&p_u, m);
        Ok(SemiRandomizedBasePolicy { p_u, law })
    }
}

/// Base policy together with its per-device value tables.
#[derive(Debug, Clone)]
pub struct DecomposedSolution {
    pub base: SemiRandomizedBasePolicy,
    pub tables: Vec<PerDeviceValueTable>,
}

/// Solves every device's Bellman equation under the base marginals `p_u`.
pub fn solve_decomposed(model: &SystemModel, p_u: &[f64], cfg: &SolverConfig) -> Result<DecomposedSolution> {
    if p_u.len() != model.k() {
        return Err(Error::InvalidConfig(format!("{} probabilities for {} devices", p_u.len(), model.k())));
    }
    let base = SemiRandomizedBasePolicy::new(p_u.to_vec(), model.m())?;
    let tables =
        (0..model.k()).into_par_iter().map(|k| solve_per_device(model, k, p_u[k], cfg)).collect::<Result<Vec<_>>>()?;
    Ok(DecomposedSolution { base, tables })
}

type Scores = SmallVec<[[Option<f64>; 3]; 8]>;

impl DecomposedSolution {
    /// Average cost of the base policy.
    pub fn theta_base(&self) -> f64 {
        self.tables.iter().map(|t| t.theta).sum()
    }

    /// Total entries over all per-device tables.
    pub fn table_entries(&self) -> usize {
        self.tables.iter().map(|t| t.values.len()).sum()
    }

    pub fn decomposed_value(&self, local: &[usize]) -> f64 {
        local.iter().zip(&self.tables).map(|(&x, t)| t.values[x]).sum()
    }

    fn scores(&self, model: &SystemModel, local: &[usize]) -> Scores {
        local
            .iter()
            .zip(&self.tables)
            .zip(model.devices())
            .map(|((&x, t), dev)| DeviceAction::ALL.map(|w| t.expected(dev, x, w)))
            .collect()
    }

    /// `J(X, W) = c(X) + E[sum_k V_k(X'_k)]`, `None` if `W` is infeasible.
    pub fn j_value(&self, model: &SystemModel, local: &[usize], a: usize) -> Option<f64> {
        let w = &model.actions()[a];
        let mut total = model.stage_cost_local(local);
        for (k, (&x, t)) in local.iter().zip(&self.tables).enumerate() {
            total += t.expected(model.device(k), x, w.0[k])?;
        }
        Some(total)
    }

    fn enumerated_argmin(&self, model: &SystemModel, scores: &Scores) -> usize {
        let idle: f64 = scores.iter().map(|s| s[0].expect("idle is feasible")).sum();
        let candidates = (0..model.actions().len()).map(|a| {
            let mut total = idle;
            for &(k, w) in model.scheduled_entries(a) {
                total += scores[k][w as usize]? - scores[k][0]?;
            }
            Some(total)
        });
        tie_broken_argmin(candidates).expect("idle is feasible")
    }

    fn separable_argmin(&self, model: &SystemModel, scores: &Scores) -> SystemAction {
        let mut gains: Vec<(f64, usize, DeviceAction)> = scores
            .iter()
            .enumerate()
            .filter_map(|(k, s)| {
                let (w, v) = match tie_broken_argmin(s[1..].iter().copied())? {
                    0 => (DeviceAction::Continue, s[1]?),
                    _ => (DeviceAction::Fresh, s[2]?),
                };
                let gain = v - s[0]?;
                (gain < -TIE_EPS).then_some((gain, k, w))
            })
            .collect();
        gains.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut action = SystemAction::idle(model.k());
        for &(_, k, w) in gains.iter().take(model.m()) {
            action.0[k] = w;
        }
        action
    }

    /// Improved-policy action at a joint state given by per-device indices.
    pub fn suboptimal_action_local(&self, model: &SystemModel, local: &[usize]) -> SystemAction {
        let scores = self.scores(model, local);
        if model.actions().len() <= ENUMERATION_LIMIT {
            model.actions()[self.enumerated_argmin(model, &scores)].clone()
        } else {
            self.separable_argmin(model, &scores)
        }
    }

    /// Index of the improved-policy action by full enumeration.
    pub fn suboptimal_action_id(&self, model: &SystemModel, local: &[usize]) -> u32 {
        self.enumerated_argmin(model, &self.scores(model, local)) as u32
    }

    /// Same as [`Self::suboptimal_action_local`] but always via the
    /// separable per-device ranking.
    pub fn separable_action(&self, model: &SystemModel, local: &[usize]) -> SystemAction {
        self.separable_argmin(model, &self.scores(model, local))
    }

    /// Schedules the `M` devices with the largest receiver AoI (lowest index
    /// first among ties), each with its own sampling action.
    pub fn greedy_action_local(&self, model: &SystemModel, local: &[usize]) -> SystemAction {
        let mut order: Vec<(u32, usize)> =
            local.iter().enumerate().map(|(k, &x)| (model.device(k).a_r_of(x), k)).collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut action = SystemAction::idle(model.k());
        for &(_, k) in order.iter().take(model.m()) {
            action.0[k] = self.tables[k].sampling[local[k]];
        }
        action
    }

    /// Base-policy action for selected devices `chosen`.
    pub fn base_action_for(&self, local: &[usize], chosen: &[usize], out: &mut SystemAction) {
        out.0.iter_mut().for_each(|w| *w = DeviceAction::Idle);
        for &k in chosen {
            out.0[k] = self.tables[k].sampling[local[k]];
        }
    }

    /// Joint action law of the base policy at a state.
    pub fn base_law(&self, model: &SystemModel, local: &[usize], out: &mut Vec<(f64, u32)>) -> Result<()> {
        let mut w = SystemAction::idle(model.k());
        for (p, chosen) in &self.base.law {
            self.base_action_for(local, chosen, &mut w);
            let a = model.action_index(&w).ok_or_else(|| Error::InfeasibleAction(format!("base action {w}")))?;
            out.push((*p, a as u32));
        }
        Ok(())
    }
}

/// Improved-policy action at `x`.
pub fn suboptimal_action(x: &SystemState, solution: &DecomposedSolution, model: &SystemModel) -> Result<SystemAction> {
    Ok(solution.suboptimal_action_local(model, &model.local_of(x)?))
}

/// Greedy baseline action at `x`.
pub fn greedy_policy_action(
    x: &SystemState,
    solution: &DecomposedSolution,
    model: &SystemModel,
) -> Result<SystemAction> {
    Ok(solution.greedy_action_local(model, &model.local_of(x)?))
}

/// Improved policy materialized state by state.
pub fn suboptimal_policy_table(model: &SystemModel, solution: &DecomposedSolution) -> Result<Policy> {
    let n = model.require_joint_states(usize::MAX)?;
    let action_ids =
        (0..n).into_par_iter().map(|x| solution.suboptimal_action_id(model, &model.split_index(x))).collect();
    Ok(Policy { action_ids })
}

/// Improved policy materialized with fresh-action propagation along `a_d`.
pub fn algorithm1_policy(
    model: &SystemModel,
    solution: &DecomposedSolution,
    max_states: usize,
) -> Result<PropagatedPolicy> {
    model.require_joint_states(max_states)?;
    propagate_fresh_actions(model, |_, local| solution.suboptimal_action_id(model, local))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub states: usize,
    /// Largest `|V(X) - V(X_ref) - sum_k (V_k(X_k) - V_k(X_k,ref))|`.
    pub max_gap: f64,
    pub theta_joint: f64,
    pub theta_sum: f64,
}

/// Solves the joint Bellman equation under the base policy, with sampling
/// minimized jointly, and compares it with the per-device tables.
pub fn verify_decomposition(
    model: &SystemModel,
    solution: &DecomposedSolution,
    cfg: &SolverConfig,
) -> Result<DecompositionReport> {
    const MAX_DEVICES: usize = 12;
    if model.k() > MAX_DEVICES {
        return Err(Error::BudgetExceeded(format!("joint sampling vectors for K = {}", model.k())));
    }
    let n = model.require_joint_states(cfg.max_states.min(1_000_000))?;
    let reference_local = model.reference_local();
    let reference = model.join_index(&reference_local);
    let k = model.k();
    let joint = relative_value_iteration(n, reference, cfg, |x, h| {
        let local = model.split_index(x);
        let options: SmallVec<[SmallVec<[DeviceAction; 2]>; 8]> = local
            .iter()
            .zip(model.devices())
            .map(|(&s, dev)| {
                let o: SmallVec<[DeviceAction; 2]> = [DeviceAction::Continue, DeviceAction::Fresh]
                    .into_iter()
                    .filter(|&w| dev.is_feasible(s, w))
                    .collect();
                if o.is_empty() {
                    smallvec::smallvec![DeviceAction::Idle]
                } else {
                    o
                }
            })
            .collect();
        let combos: usize = options.iter().map(|o| o.len()).product();
        let mut best = f64::INFINITY;
        let mut w = SystemAction::idle(k);
        for c in 0..combos {
            let mut rest = c;
            let v: SmallVec<[DeviceAction; 8]> = options
                .iter()
                .map(|o| {
                    let a = o[rest % o.len()];
                    rest /= o.len();
                    a
                })
                .collect();
            let mut total = 0.0;
            for (p, chosen) in &solution.base.law {
                w.0.iter_mut().for_each(|a| *a = DeviceAction::Idle);
                for &d in chosen {
                    w.0[d] = v[d];
                }
                total += p * model.expected_value(&local, &w, h).expect("sampling options are feasible");
            }
            best = best.min(total);
        }
        model.stage_cost_local(&local) + best
    })?;
    let base_sum = solution.decomposed_value(&reference_local);
    let mut max_gap: f64 = 0.0;
    for x in 0..n {
        let local = model.split_index(x);
        let gap = (joint.values[x] - joint.values[reference] - (solution.decomposed_value(&local) - base_sum)).abs();
        max_gap = max_gap.max(gap);
    }
    Ok(DecompositionReport { states: n, max_gap, theta_joint: joint.theta, theta_sum: solution.theta_base() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{evaluate_randomized_policy, exact_policy_evaluation};
    use crate::model::{DeviceParams, ModelVariant};

    fn fleet(lambdas: &[f64], l: u32, cap: u32, m: usize) -> SystemModel {
        let devices = lambdas.iter().map(|&x| DeviceParams::uniform(l, x, cap)).collect();
        SystemModel::new(SystemConfig::new(devices, m, ModelVariant::GenerateAtWill).unwrap()).unwrap()
    }

    #[test]
    fn base_marginals() {
        let p = default_base_scheduling(fleet(&[0.7, 0.8], 2, 2, 1).config());
        assert!((p[0] - 7.0 / 15.0).abs() < 1e-15 && (p[1] - 8.0 / 15.0).abs() < 1e-15);
        assert_eq!(default_base_scheduling(fleet(&[0.5, 0.5], 2, 2, 1).config()), vec![0.5, 0.5]);
        assert_eq!(default_base_scheduling(fleet(&[0.3], 2, 2, 1).config()), vec![1.0]);
        assert_eq!(default_base_scheduling(fleet(&[0.3, 0.9], 2, 2, 2).config()), vec![0.5, 1.0]);
    }

    #[test]
    fn scheduling_law_preserves_marginals() {
        for (p, m) in
            [(vec![0.5, 0.5], 1), (vec![0.2, 0.3, 0.4], 1), (vec![0.7, 0.6, 0.5, 0.2], 2), (vec![1.0, 0.0], 1)]
        {
            let law = scheduling_law(&p, m);
            let total: f64 = law.iter().map(|e| e.0).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (k, &pk) in p.iter().enumerate() {
                let marginal: f64 = law.iter().filter(|e| e.1.contains(&k)).map(|e| e.0).sum();
                assert!((marginal - pk).abs() < 1e-12, "{p:?} device {k}: {marginal}");
            }
            assert!(law.iter().all(|e| e.1.len() <= m));
        }
    }

    #[test]
    fn never_scheduled_device_saturates() {
        let model = fleet(&[0.6], 3, 5, 1);
        let t = solve_per_device(&model, 0, 0.0, &SolverConfig::default()).unwrap();
        assert!((t.theta - 5.0).abs() < 1e-8);
    }

    #[test]
    fn always_scheduled_reliable_device() {
        let model = fleet(&[1.0], 2, 10, 1);
        let t = solve_per_device(&model, 0, 1.0, &SolverConfig::default()).unwrap();
        assert!((t.theta - 2.5).abs() < 1e-6);
    }

    #[test]
    fn per_device_theta_matches_randomized_chain() {
        let model = fleet(&[0.8], 3, 6, 1);
        let sol = solve_decomposed(&model, &[0.5], &SolverConfig::default()).unwrap();
        let eval = evaluate_randomized_policy(&model, |local, out| sol.base_law(&model, local, out)).unwrap();
        assert!((eval.theta - sol.theta_base()).abs() < 1e-6, "{} vs {}", eval.theta, sol.theta_base());
    }

    #[test]
    fn decomposition_is_exact() {
        let model = fleet(&[0.6, 0.8], 2, 3, 1);
        let cfg = SolverConfig::default();
        let sol = solve_decomposed(&model, &[0.5, 0.5], &cfg).unwrap();
        let r = verify_decomposition(&model, &sol, &cfg).unwrap();
        assert!(r.max_gap <= 1e-6, "{r:?}");
        assert!((r.theta_joint - r.theta_sum).abs() <= 1e-8, "{r:?}");

        let sol = solve_decomposed(&model, &[1.0, 0.0], &cfg).unwrap();
        let never = solve_per_device(&model, 1, 0.0, &cfg).unwrap();
        assert_eq!(sol.tables[1], never);
        let r = verify_decomposition(&model, &sol, &cfg).unwrap();
        assert!(r.max_gap <= 1e-6, "{r:?}");
    }

    #[test]
    fn single_device_decomposition_is_identity() {
        let model = fleet(&[0.7], 3, 4, 1);
        let cfg = SolverConfig::default();
        let sol = solve_decomposed(&model, &[0.6], &cfg).unwrap();
        let r = verify_decomposition(&model, &sol, &cfg).unwrap();
        assert!(r.max_gap < 1e-8);
    }

    #[test]
    fn improved_policy_beats_base() {
        let model = fleet(&[0.6, 0.9], 3, 4, 1);
        let cfg = SolverConfig::default();
        let sol = solve_decomposed(&model, &default_base_scheduling(model.config()), &cfg).unwrap();
        let table = suboptimal_policy_table(&model, &sol).unwrap();
        let theta = exact_policy_evaluation(&model, &table).unwrap();
        assert!(theta <= sol.theta_base() + 1e-9, "{theta} vs {}", sol.theta_base());
        let alg1 = algorithm1_policy(&model, &sol, usize::MAX).unwrap();
        assert_eq!(alg1.policy, table);
        assert!(alg1.skipped > 0);
    }

    #[test]
    fn idle_only_model() {
        let model = fleet(&[0.6, 0.9], 2, 3, 0);
        let sol = solve_decomposed(&model, &[0.0, 0.0], &SolverConfig::default()).unwrap();
        let alg1 = algorithm1_policy(&model, &sol, usize::MAX).unwrap();
        assert_eq!(alg1.skipped, 0);
        assert!(alg1.policy.action_ids.iter().all(|&a| a == 0));
    }

    #[test]
    fn greedy_examples() {
        let model = fleet(&[0.5, 0.5], 2, 10, 1);
        let sol = solve_decomposed(&model, &[0.5, 0.5], &SolverConfig::default()).unwrap();
        let at = |rs: &[u32]| {
            let x = SystemState::new(rs.iter().map(|&r| crate::model::DeviceState::new(2, r, 2)).collect());
            greedy_policy_action(&x, &sol, &model).unwrap()
        };
        assert!(at(&[5, 3]).0[0].is_scheduled() && !at(&[5, 3]).0[1].is_scheduled());
        assert!(at(&[5, 5]).0[0].is_scheduled() && !at(&[5, 5]).0[1].is_scheduled());

        let model = fleet(&[0.5, 0.5, 0.5], 2, 10, 2);
        let sol = solve_decomposed(&model, &[0.5, 0.5, 0.5], &SolverConfig::default()).unwrap();
        let x = SystemState::new([1, 9, 4].iter().map(|&r| crate::model::DeviceState::new(2, r, 2)).collect());
        let w = greedy_policy_action(&x, &sol, &model).unwrap();
        assert_eq!(w.scheduled_devices().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn separable_matches_enumeration() {
        let model = fleet(&[0.5, 0.6, 0.7, 0.9], 2, 3, 2);
        let sol = solve_decomposed(&model, &default_base_scheduling(model.config()), &SolverConfig::default()).unwrap();
        for x in 0..model.joint_state_count().unwrap() {
            let local = model.split_index(x);
            let a = &model.actions()[sol.suboptimal_action_id(&model, &local) as usize];
            let b = sol.separable_action(&model, &local);
            let ja = sol.j_value(&model, &local, model.action_index(a).unwrap()).unwrap();
            let jb = sol.j_value(&model, &local, model.action_index(&b).unwrap()).unwrap();
            assert!((ja - jb).abs() < 1e-8, "state {x}: {a} vs {b}");
        }
    }
}
