//! Batch experiments behind the `aoi-sched` binary.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::decomp::{algorithm1_policy, default_base_scheduling, solve_decomposed, DecomposedSolution};
use crate::error::{Error, Result};
use crate::exact::{
    evaluate_randomized_policy, exact_policy_evaluation, fresh_region_breaks, joint_j, rvia_solve,
    structure_aware_extract, thresholds_with, PropagatedPolicy, ValueTable,
};
use crate::export;
use crate::fleet::{FleetFile, MapPolicy};
use crate::model::{DeviceAction, SystemAction, SystemModel};
use crate::sim::{
    compare_policies, simulate, ActionSource, BasePolicy, GreedyPolicy, SimResult, SuboptimalPolicy, TablePolicy,
};
use crate::TIE_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Optimal,
    Suboptimal,
    Base,
    Greedy,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Optimal => "optimal",
            PolicyKind::Suboptimal => "suboptimal",
            PolicyKind::Base => "base",
            PolicyKind::Greedy => "greedy",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(PolicyKind::Optimal),
            "suboptimal" => Ok(PolicyKind::Suboptimal),
            "base" => Ok(PolicyKind::Base),
            "greedy" => Ok(PolicyKind::Greedy),
            other => Err(Error::InvalidConfig(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    SolveOptimal,
    SolveSuboptimal,
    Simulate(PolicyKind),
    Compare,
    StructureMap,
    Sweep,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentKind::SolveOptimal => f.write_str("solve-optimal"),
            ExperimentKind::SolveSuboptimal => f.write_str("solve-suboptimal"),
            ExperimentKind::Simulate(p) => write!(f, "simulate --policy {}", p.as_str()),
            ExperimentKind::Compare => f.write_str("compare"),
            ExperimentKind::StructureMap => f.write_str("structure-map"),
            ExperimentKind::Sweep => f.write_str("sweep"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub kind: ExperimentKind,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub horizon: Option<u64>,
    pub reps: Option<u32>,
    /// Worker threads; 0 picks the number of CPUs.
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::NonConvergence { .. } => 3,
        Error::BudgetExceeded(_) => 4,
        _ => 1,
    }
}

/// Machine-readable error report.
pub fn error_json(e: &Error) -> serde_json::Value {
    json!({ "error": e.kind(), "message": e.to_string(), "exit_code": exit_code(e) })
}

/// Fleet file with command-line overrides applied.
pub fn resolve_fleet(spec: &ExperimentSpec) -> Result<FleetFile> {
    let mut fleet = FleetFile::load(&spec.config)?;
    if let Some(seed) = spec.seed {
        fleet.simulation.seed = seed;
    }
    if let Some(tol) = spec.tol {
        fleet.solver.tol = tol;
    }
    if let Some(reps) = spec.reps {
        fleet.simulation.replications = reps;
    }
    if let Some(h) = spec.horizon {
        fleet.simulation.horizon = h;
        if fleet.simulation.burn_in >= h {
            fleet.simulation.burn_in = h / 10;
        }
    }
    fleet.solver.validate()?;
    fleet.simulation.validate()?;
    Ok(fleet)
}

pub fn run(spec: &ExperimentSpec) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(spec))
}

struct Context {
    fleet: FleetFile,
    model: SystemModel,
    out: PathBuf,
    provenance: serde_json::Value,
    files: Vec<PathBuf>,
}

impl Context {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.files.push(p.clone());
        p
    }

    fn base_marginals(&self) -> Vec<f64> {
        match &self.fleet.base {
            Some(b) => b.p_u.clone(),
            None => default_base_scheduling(self.model.config()),
        }
    }

    fn decomposed(&self) -> Result<DecomposedSolution> {
        solve_decomposed(&self.model, &self.base_marginals(), &self.fleet.solver)
    }

    fn joint_fits(&self) -> bool {
        self.model.joint_state_count().is_some_and(|n| n <= self.fleet.solver.max_states)
    }
}

fn run_inner(spec: &ExperimentSpec) -> Result<RunOutcome> {
    let fleet = resolve_fleet(spec)?;
    let model = SystemModel::new(fleet.system_config()?)?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let provenance = json!({
        "command": spec.kind.to_string(),
        "seed": fleet.simulation.seed,
        "config": fleet,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut ctx = Context { fleet, model, out: spec.out_dir.clone(), provenance, files: Vec::new() };
    let result = match spec.kind {
        ExperimentKind::SolveOptimal => solve_optimal(&mut ctx)?,
        ExperimentKind::SolveSuboptimal => solve_suboptimal(&mut ctx)?,
        ExperimentKind::Simulate(p) => simulate_one(&mut ctx, p)?,
        ExperimentKind::Compare => compare(&mut ctx)?,
        ExperimentKind::StructureMap => structure_map(&mut ctx)?,
        ExperimentKind::Sweep => sweep(&mut ctx)?,
    };
    let summary = json!({
        "command": spec.kind.to_string(),
        "seed": ctx.fleet.simulation.seed,
        "config": ctx.fleet,
        "joint_states": ctx.model.joint_state_count(),
        "result": result,
    });
    let path = ctx.path("summary.json");
    export::write_json(&path, &summary)?;
    Ok(RunOutcome { files: ctx.files, summary })
}

fn solve_optimal(ctx: &mut Context) -> Result<serde_json::Value> {
    let values = rvia_solve(&ctx.model, &ctx.fleet.solver)?;
    let extracted = structure_aware_extract(&ctx.model, &values)?;
    let path = ctx.path("policy.csv");
    export::write_policy_csv(&path, &ctx.model, &extracted.policy, Some(&values.values), &ctx.provenance)?;
    Ok(json!({
        "theta": values.theta,
        "mean_aoi_per_device": values.theta / ctx.model.k() as f64,
        "iterations": values.iterations,
        "span": values.span,
        "skipped_minimizations": extracted.skipped,
    }))
}

fn solve_suboptimal(ctx: &mut Context) -> Result<serde_json::Value> {
    let sol = ctx.decomposed()?;
    for (k, t) in sol.tables.iter().enumerate() {
        let path = ctx.path(&format!("per_device_{k}.csv"));
        export::write_per_device_csv(&path, ctx.model.device(k), t, &ctx.provenance)?;
    }
    let mut result = json!({
        "p_u": sol.base.p_u,
        "theta_base": sol.theta_base(),
        "per_device_theta": sol.tables.iter().map(|t| t.theta).collect::<Vec<_>>(),
        "table_entries": sol.table_entries(),
    });
    if ctx.joint_fits() {
        let alg1 = algorithm1_policy(&ctx.model, &sol, ctx.fleet.solver.max_states)?;
        let theta = exact_policy_evaluation(&ctx.model, &alg1.policy)?;
        let path = ctx.path("policy.csv");
        export::write_policy_csv(&path, &ctx.model, &alg1.policy, None, &ctx.provenance)?;
        result["theta_suboptimal"] = json!(theta);
        result["skipped_minimizations"] = json!(alg1.skipped);
    }
    Ok(result)
}

fn optimal_table(ctx: &Context) -> Result<(ValueTable, PropagatedPolicy)> {
    ctx.model.require_joint_states(ctx.fleet.solver.max_states)?;
    let values = rvia_solve(&ctx.model, &ctx.fleet.solver)?;
    let extracted = structure_aware_extract(&ctx.model, &values)?;
    Ok((values, extracted))
}

fn sim_summary(name: &str, r: &SimResult) -> serde_json::Value {
    json!({
        "policy": name,
        "overall_mean": r.overall_mean,
        "std_error": r.std_error,
        "per_device_mean": r.per_device_mean,
    })
}

fn simulate_one(ctx: &mut Context, kind: PolicyKind) -> Result<serde_json::Value> {
    let sim = ctx.fleet.simulation.clone();
    let result = match kind {
        PolicyKind::Optimal => {
            let (_, extracted) = optimal_table(ctx)?;
            simulate(&TablePolicy(&extracted.policy), &ctx.model, &sim)?
        }
        other => {
            let sol = ctx.decomposed()?;
            let source: Box<dyn ActionSource> = match other {
                PolicyKind::Suboptimal => Box::new(SuboptimalPolicy(&sol)),
                PolicyKind::Base => Box::new(BasePolicy(&sol)),
                _ => Box::new(GreedyPolicy(&sol)),
            };
            simulate(source.as_ref(), &ctx.model, &sim)?
        }
    };
    let path = ctx.path("simulation.csv");
    export::write_simulation_csv(&path, &[(kind.as_str().to_string(), result.clone())], &ctx.provenance)?;
    Ok(sim_summary(kind.as_str(), &result))
}

fn compare(ctx: &mut Context) -> Result<serde_json::Value> {
    let sim = ctx.fleet.simulation.clone();
    let sol = ctx.decomposed()?;
    let optimal = if ctx.joint_fits() { Some(optimal_table(ctx)?.1.policy) } else { None };
    let table = optimal.as_ref().map(TablePolicy);
    let (sub, greedy, base) = (SuboptimalPolicy(&sol), GreedyPolicy(&sol), BasePolicy(&sol));
    let mut policies: Vec<(&str, &dyn ActionSource)> = Vec::new();
    if let Some(t) = &table {
        policies.push(("optimal", t));
    }
    policies.push(("suboptimal", &sub));
    policies.push(("greedy", &greedy));
    policies.push(("base", &base));
    let cmp = compare_policies(&policies, &ctx.model, &sim)?;
    let path = ctx.path("comparison.csv");
    export::write_simulation_csv(&path, &cmp.results, &ctx.provenance)?;
    Ok(json!({
        "results": cmp.results.iter().map(|(n, r)| sim_summary(n, r)).collect::<Vec<_>>(),
        "ranking": cmp.ranking,
        "differences": cmp.differences,
    }))
}

fn fresh_only(model: &SystemModel, k: usize) -> SystemAction {
    let mut w = SystemAction::idle(model.k());
    w.0[k] = DeviceAction::Fresh;
    w
}

fn structure_map(ctx: &mut Context) -> Result<serde_json::Value> {
    let which = ctx.fleet.structure_map.clone().unwrap_or_default().policy;
    ctx.model.require_joint_states(ctx.fleet.solver.max_states)?;
    let mut thresholds = Vec::new();
    let (policy, skipped) = match which {
        MapPolicy::Optimal => {
            let (values, PropagatedPolicy { policy, skipped }) = optimal_table(ctx)?;
            for k in 0..ctx.model.k() {
                let w = fresh_only(&ctx.model, k);
                let map =
                    thresholds_with(&ctx.model, k, &w, TIE_EPS, |l, a| joint_j(&ctx.model, l, a, &values.values))?;
                thresholds.push(map);
            }
            let path = ctx.path("structure_map.csv");
            export::write_policy_csv(&path, &ctx.model, &policy, Some(&values.values), &ctx.provenance)?;
            (policy, skipped)
        }
        MapPolicy::Suboptimal => {
            let sol = ctx.decomposed()?;
            let alg1 = algorithm1_policy(&ctx.model, &sol, ctx.fleet.solver.max_states)?;
            for k in 0..ctx.model.k() {
                let w = fresh_only(&ctx.model, k);
                thresholds.push(thresholds_with(&ctx.model, k, &w, TIE_EPS, |l, a| sol.j_value(&ctx.model, l, a))?);
            }
            let path = ctx.path("structure_map.csv");
            export::write_policy_csv(&path, &ctx.model, &alg1.policy, None, &ctx.provenance)?;
            (alg1.policy, alg1.skipped)
        }
    };
    for map in &thresholds {
        let path = ctx.path(&format!("thresholds_{}.csv", map.device));
        export::write_thresholds_csv(&path, &ctx.model, map, &ctx.provenance)?;
    }
    Ok(json!({
        "policy": match which { MapPolicy::Optimal => "optimal", MapPolicy::Suboptimal => "suboptimal" },
        "skipped_minimizations": skipped,
        "fresh_region_breaks": fresh_region_breaks(&ctx.model, &policy),
        "finite_thresholds": thresholds.iter().map(|m| m.entries.iter().filter(|e| e.phi.is_some()).count()).collect::<Vec<_>>(),
    }))
}

fn integral(v: f64, name: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 {
        return Err(Error::InvalidConfig(format!("{name} must be a non-negative integer, got {v}")));
    }
    Ok(v as usize)
}

/// Copy of `fleet` with one parameter set to `value`.
pub fn apply_sweep(fleet: &FleetFile, parameter: &str, value: f64) -> Result<FleetFile> {
    let mut f = fleet.clone();
    match parameter {
        "lambda" => f.devices.iter_mut().for_each(|d| d.lambda = value),
        "rho" => f.devices.iter_mut().for_each(|d| d.rho = Some(value)),
        "L" => {
            let l = integral(value, "L")? as u32;
            f.devices.iter_mut().for_each(|d| d.packets = l);
        }
        "M" => f.m = integral(value, "M")?,
        "K" => f.k = Some(integral(value, "K")?),
        p if p.starts_with("lambda.") => {
            let k: usize =
                p["lambda.".len()..].parse().map_err(|_| Error::InvalidConfig(format!("bad sweep parameter `{p}`")))?;
            f.devices = f.expanded_devices();
            f.k = None;
            let d =
                f.devices.get_mut(k).ok_or_else(|| Error::InvalidConfig(format!("sweep device {k} does not exist")))?;
            d.lambda = value;
        }
        other => return Err(Error::InvalidConfig(format!("unknown sweep parameter `{other}`"))),
    }
    f.system_config()?;
    Ok(f)
}

/// Per-device mean AoI of every policy at one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub method: &'static str,
    pub optimal: Option<f64>,
    pub suboptimal: f64,
    pub base: f64,
    pub greedy: f64,
    pub suboptimal_se: Option<f64>,
    pub base_se: Option<f64>,
    pub greedy_se: Option<f64>,
}

/// Exact evaluation of all four policies.
pub fn exact_point(model: &SystemModel, fleet: &FleetFile, p_u: &[f64]) -> Result<SweepPoint> {
    let k = model.k() as f64;
    let values = rvia_solve(model, &fleet.solver)?;
    let sol = solve_decomposed(model, p_u, &fleet.solver)?;
    let sub = algorithm1_policy(model, &sol, fleet.solver.max_states)?.policy;
    let sub_theta = exact_policy_evaluation(model, &sub)?;
    let greedy = evaluate_randomized_policy(model, |local, out| {
        let w = sol.greedy_action_local(model, local);
        let a = model.action_index(&w).ok_or_else(|| Error::InfeasibleAction(w.to_string()))?;
        out.push((1.0, a as u32));
        Ok(())
    })?;
    Ok(SweepPoint {
        value: 0.0,
        method: "exact",
        optimal: Some(values.theta / k),
        suboptimal: sub_theta / k,
        base: sol.theta_base() / k,
        greedy: greedy.theta / k,
        suboptimal_se: None,
        base_se: None,
        greedy_se: None,
    })
}

fn simulated_point(model: &SystemModel, fleet: &FleetFile, p_u: &[f64]) -> Result<SweepPoint> {
    let sol = solve_decomposed(model, p_u, &fleet.solver)?;
    let cmp = compare_policies(
        &[("suboptimal", &SuboptimalPolicy(&sol)), ("base", &BasePolicy(&sol)), ("greedy", &GreedyPolicy(&sol))],
        model,
        &fleet.simulation,
    )?;
    let r = |i: usize| &cmp.results[i].1;
    Ok(SweepPoint {
        value: 0.0,
        method: "simulation",
        optimal: None,
        suboptimal: r(0).overall_mean,
        base: r(1).overall_mean,
        greedy: r(2).overall_mean,
        suboptimal_se: Some(r(0).std_error),
        base_se: Some(r(1).std_error),
        greedy_se: Some(r(2).std_error),
    })
}

fn sweep(ctx: &mut Context) -> Result<serde_json::Value> {
    let spec = ctx.fleet.sweep.clone().ok_or_else(|| Error::InvalidConfig("sweep requires a [sweep] table".into()))?;
    let mut points = Vec::new();
    for &value in &spec.values {
        let fleet = apply_sweep(&ctx.fleet, &spec.parameter, value)?;
        let model = SystemModel::new(fleet.system_config()?)?;
        let p_u = match &fleet.base {
            Some(b) if b.p_u.len() == model.k() => b.p_u.clone(),
            _ => default_base_scheduling(model.config()),
        };
        let fits = model.joint_state_count().is_some_and(|n| n <= fleet.solver.max_states);
        let mut point = if fits { exact_point(&model, &fleet, &p_u)? } else { simulated_point(&model, &fleet, &p_u)? };
        point.value = value;
        points.push(point);
    }
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                spec.parameter.clone(),
                p.value.to_string(),
                p.method.to_string(),
                opt(p.optimal),
                p.suboptimal.to_string(),
                p.base.to_string(),
                p.greedy.to_string(),
                opt(p.suboptimal_se),
                opt(p.base_se),
                opt(p.greedy_se),
            ]
        })
        .collect();
    let path = ctx.path("sweep.csv");
    export::write_rows_csv(
        &path,
        &[
            "parameter",
            "value",
            "method",
            "optimal",
            "suboptimal",
            "base",
            "greedy",
            "suboptimal_se",
            "base_se",
            "greedy_se",
        ],
        &rows,
        &ctx.provenance,
    )?;
    Ok(json!({ "parameter": spec.parameter, "points": points }))
}
