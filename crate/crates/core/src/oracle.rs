//! Exhaustive search over deterministic stationary policies for tiny models.
//!
//! The average cost from the all-fresh start only depends on the actions
//! taken in states reachable from it, so the search assigns actions along the
//! reachable frontier instead of over the full state space. Every
//! deterministic policy agrees with exactly one enumerated partial policy on
//! its reachable set, so the minimum is unchanged.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::Policy;
use crate::markov::evaluate_average_cost;
use crate::model::SystemModel;

const UNSET: u8 = u8::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleBudget {
    pub max_states: usize,
    pub max_policies: u64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget { max_states: 512, max_policies: 2_000_000 }
    }
}

/// Result of evaluating one enumerated policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PolicyOutcome {
    Evaluated(f64),
    Skipped(String),
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best_theta: f64,
    /// Best policy; states it never visits map to all-idle.
    pub best_policy: Policy,
    /// One outcome per enumerated policy, in enumeration order.
    pub outcomes: Vec<PolicyOutcome>,
}

impl OracleResult {
    pub fn evaluated(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o, PolicyOutcome::Evaluated(_))).count()
    }

    pub fn skipped(&self) -> usize {
        self.outcomes.len() - self.evaluated()
    }
}

struct Search<'m> {
    model: &'m SystemModel,
    budget: OracleBudget,
    start: usize,
    feasible: Vec<Vec<u8>>,
    successors: Vec<Vec<Vec<usize>>>,
    outcomes: Vec<PolicyOutcome>,
    best: Option<(f64, Vec<u8>)>,
}

impl Search<'_> {
    fn leaf(&mut self, assign: &[u8]) -> Result<()> {
        if self.outcomes.len() as u64 >= self.budget.max_policies {
            return Err(Error::BudgetExceeded(format!("more than {} reachable policies", self.budget.max_policies)));
        }
        let model = self.model;
        let eval = evaluate_average_cost(
            self.start,
            |x, out| {
                let w = &model.actions()[assign[x] as usize];
                model.for_each_successor(&model.split_index(x), w, |y, p| out.push((y, p)));
                Ok(())
            },
            |x| model.stage_cost_local(&model.split_index(x)),
        );
        match eval {
            Ok(e) => {
                if self.best.as_ref().is_none_or(|(b, _)| e.theta < *b) {
                    self.best = Some((e.theta, assign.to_vec()));
                }
                self.outcomes.push(PolicyOutcome::Evaluated(e.theta));
            }
            Err(Error::MultichainDetected { classes }) => {
                self.outcomes.push(PolicyOutcome::Skipped(format!("{classes} recurrent classes")));
            }
            Err(Error::SingularSystem(msg)) => {
                self.outcomes.push(PolicyOutcome::Skipped(format!("singular chain: {msg}")));
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn dfs(&mut self, assign: &mut Vec<u8>, pending: &mut Vec<usize>) -> Result<()> {
        let mut done = Vec::new();
        let s = loop {
            match pending.pop() {
                None => {
                    let r = self.leaf(assign);
                    pending.extend(done.into_iter().rev());
                    return r;
                }
                Some(s) if assign[s] != UNSET => done.push(s),
                Some(s) => break s,
            }
        };
        for i in 0..self.feasible[s].len() {
            let a = self.feasible[s][i];
            assign[s] = a;
            let mark = pending.len();
            for &y in &self.successors[s][i] {
                if assign[y] == UNSET {
                    pending.push(y);
                }
            }
            let r = self.dfs(assign, pending);
            pending.truncate(mark);
            r?;
        }
        assign[s] = UNSET;
        pending.push(s);
        pending.extend(done.into_iter().rev());
        Ok(())
    }
}

/// Minimum average cost over all deterministic stationary policies.
pub fn enumerate_and_evaluate(model: &SystemModel, budget: OracleBudget) -> Result<OracleResult> {
    let n = model.require_joint_states(budget.max_states)?;
    if model.actions().len() >= UNSET as usize {
        return Err(Error::BudgetExceeded(format!("{} joint actions", model.actions().len())));
    }
    let mut feasible = Vec::with_capacity(n);
    let mut successors = Vec::with_capacity(n);
    for x in 0..n {
        let local = model.split_index(x);
        let mut acts = Vec::new();
        let mut succ = Vec::new();
        for (a, w) in model.actions().iter().enumerate() {
            let mut ys = Vec::new();
            if model.for_each_successor(&local, w, |y, p| {
                if p > 0.0 {
                    ys.push(y)
                }
            }) {
                acts.push(a as u8);
                succ.push(ys);
            }
        }
        feasible.push(acts);
        successors.push(succ);
    }
    let start = model.join_index(&model.reference_local());
    let mut search = Search { model, budget, start, feasible, successors, outcomes: Vec::new(), best: None };
    let mut assign = vec![UNSET; n];
    search.dfs(&mut assign, &mut vec![start])?;
    let Some((best_theta, best)) = search.best else {
        return Err(Error::SingularSystem("no enumerated policy is unichain from the start state".into()));
    };
    let action_ids = best.iter().map(|&a| if a == UNSET { 0 } else { a as u32 }).collect();
    Ok(OracleResult { best_theta, best_policy: Policy { action_ids }, outcomes: search.outcomes })
}
