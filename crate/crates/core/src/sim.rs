//! Seeded Monte Carlo evaluation of scheduling policies.
//!
//! Every replication owns `K + 1` ChaCha8 streams keyed by the seed: one per
//! device for channel and arrival draws, and one for randomized policies.
//! All uniforms are drawn every slot whether or not they are used, so two
//! policies simulated with the same seed see the same channel and arrival
//! realisations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{systematic_selection, DecomposedSolution};
use crate::error::{Error, Result};
use crate::exact::Policy;
use crate::model::{device_successor, DeviceAction, SystemAction, SystemModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Slots per replication, burn-in included.
    pub horizon: u64,
    pub replications: u32,
    pub seed: u64,
    /// Leading slots left out of the average.
    pub burn_in: u64,
    /// Receiver-AoI slots recorded from the first replication.
    pub trajectory_slots: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { horizon: 10_000, replications: 20, seed: 0, burn_in: 1_000, trajectory_slots: 0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.replications == 0 {
            return Err(Error::InvalidConfig("horizon and replications must be positive".into()));
        }
        if self.burn_in >= self.horizon {
            return Err(Error::InvalidConfig(format!(
                "burn_in {} must be below the horizon {}",
                self.burn_in, self.horizon
            )));
        }
        Ok(())
    }
}

/// Something that picks a joint action for every visited state.
pub trait ActionSource: Sync {
    /// `uniform` is this slot's draw from the policy stream.
    fn choose(&self, model: &SystemModel, local: &[usize], uniform: f64, out: &mut SystemAction) -> Result<()>;
}

/// A materialized policy over the joint state space.
pub struct TablePolicy<'a>(pub &'a Policy);

impl ActionSource for TablePolicy<'_> {
    fn choose(&self, model: &SystemModel, local: &[usize], _: f64, out: &mut SystemAction) -> Result<()> {
        let x = model.join_index(local);
        let a =
            self.0.action_ids.get(x).ok_or_else(|| Error::StateOutOfRange(format!("policy table has no state {x}")))?;
        out.0.clone_from(&model.actions()[*a as usize].0);
        Ok(())
    }
}

/// One-step improvement of the base policy, evaluated on the fly.
pub struct SuboptimalPolicy<'a>(pub &'a DecomposedSolution);

impl ActionSource for SuboptimalPolicy<'_> {
    fn choose(&self, model: &SystemModel, local: &[usize], _: f64, out: &mut SystemAction) -> Result<()> {
        *out = self.0.suboptimal_action_local(model, local);
        Ok(())
    }
}

/// Largest-receiver-AoI-first scheduling.
pub struct GreedyPolicy<'a>(pub &'a DecomposedSolution);

impl ActionSource for GreedyPolicy<'_> {
    fn choose(&self, model: &SystemModel, local: &[usize], _: f64, out: &mut SystemAction) -> Result<()> {
        *out = self.0.greedy_action_local(model, local);
        Ok(())
    }
}

/// The semi-randomized base policy; scheduling uses systematic sampling.
pub struct BasePolicy<'a>(pub &'a DecomposedSolution);

impl ActionSource for BasePolicy<'_> {
    fn choose(&self, model: &SystemModel, local: &[usize], uniform: f64, out: &mut SystemAction) -> Result<()> {
        let mut chosen = Vec::with_capacity(model.m());
        systematic_selection(&self.0.base.p_u, uniform, model.m(), &mut chosen);
        self.0.base_action_for(local, &chosen, out);
        Ok(())
    }
}

/// Never schedules anything.
pub struct IdlePolicy;

impl ActionSource for IdlePolicy {
    fn choose(&self, _: &SystemModel, _: &[usize], _: f64, out: &mut SystemAction) -> Result<()> {
        out.0.iter_mut().for_each(|w| *w = DeviceAction::Idle);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    /// Mean receiver AoI per device, averaged over replications.
    pub per_device_mean: Vec<f64>,
    /// Mean of `sum_k a_r,k / K`.
    pub overall_mean: f64,
    /// Standard error of `overall_mean` across replications.
    pub std_error: f64,
    pub replication_means: Vec<f64>,
    /// `[replication][device]` means.
    pub replication_device_means: Vec<Vec<f64>>,
    /// `[slot][device]` receiver AoI of replication 0, if requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Vec<u32>>>,
}

struct Replication {
    device_means: Vec<f64>,
    overall: f64,
    trajectory: Option<Vec<Vec<u32>>>,
}

fn stream_id(rep: u32, id: usize) -> u64 {
    ((rep as u64) << 32) | id as u64
}

fn run_replication(source: &dyn ActionSource, model: &SystemModel, sim: &SimConfig, rep: u32) -> Result<Replication> {
    let k = model.k();
    let rng_for = |id: usize| {
        let mut r = ChaCha8Rng::seed_from_u64(sim.seed);
        r.set_stream(stream_id(rep, id));
        r
    };
    let mut device_rngs: Vec<ChaCha8Rng> = (0..k).map(rng_for).collect();
    let mut policy_rng = rng_for(k);
    let mut local: Vec<usize> = model.reference_local().to_vec();
    let mut states: Vec<_> = local.iter().zip(model.devices()).map(|(&s, d)| d.state(s)).collect();
    let mut sums = vec![0u64; k];
    let mut action = SystemAction::idle(k);
    let mut draws = vec![(0.0f64, 0.0f64); k];
    let record = if rep == 0 { sim.trajectory_slots.min(sim.horizon) } else { 0 };
    let mut trajectory = (record > 0).then(|| Vec::with_capacity(record as usize));

    for t in 0..sim.horizon {
        if t >= sim.burn_in {
            for (s, x) in sums.iter_mut().zip(&states) {
                *s += x.a_r as u64;
            }
        }
        if let Some(tr) = trajectory.as_mut().filter(|_| t < record) {
            tr.push(states.iter().map(|x| x.a_r).collect());
        }
        for (d, rng) in draws.iter_mut().zip(device_rngs.iter_mut()) {
            *d = (rng.random::<f64>(), rng.random::<f64>());
        }
        let u = policy_rng.random::<f64>();
        source.choose(model, &local, u, &mut action)?;
        if !model.is_feasible_local(&local, &action) {
            return Err(Error::InfeasibleAction(format!("{action} at {states:?}")));
        }
        for (kk, dev) in model.devices().iter().enumerate() {
            let p = dev.params();
            let (uc, ua) = draws[kk];
            let next = device_successor(
                model.variant(),
                p,
                &states[kk],
                action.0[kk],
                uc < p.lambda,
                ua < p.rho.unwrap_or(0.0),
            );
            states[kk] = next;
            local[kk] = dev.index(&next)?;
        }
    }
    let slots = (sim.horizon - sim.burn_in) as f64;
    let device_means: Vec<f64> = sums.iter().map(|&s| s as f64 / slots).collect();
    let overall = sums.iter().sum::<u64>() as f64 / slots / k as f64;
    Ok(Replication { device_means, overall, trajectory })
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulates `source` for `sim.replications` independent runs.
pub fn simulate(source: &dyn ActionSource, model: &SystemModel, sim: &SimConfig) -> Result<SimResult> {
    sim.validate()?;
    let reps = (0..sim.replications)
        .into_par_iter()
        .map(|r| run_replication(source, model, sim, r))
        .collect::<Result<Vec<_>>>()?;
    let replication_means: Vec<f64> = reps.iter().map(|r| r.overall).collect();
    let (overall_mean, std_error) = mean_and_se(&replication_means);
    let per_device_mean =
        (0..model.k()).map(|k| reps.iter().map(|r| r.device_means[k]).sum::<f64>() / reps.len() as f64).collect();
    let trajectory = reps.first().and_then(|r| r.trajectory.clone());
    Ok(SimResult {
        per_device_mean,
        overall_mean,
        std_error,
        replication_device_means: reps.into_iter().map(|r| r.device_means).collect(),
        replication_means,
        trajectory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseDifference {
    pub first: String,
    pub second: String,
    /// Mean over replications of `first - second`.
    pub mean_diff: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub results: Vec<(String, SimResult)>,
    /// Policy names from lowest to highest mean AoI.
    pub ranking: Vec<String>,
    pub differences: Vec<PairwiseDifference>,
}

/// Simulates every policy under common random numbers.
pub fn compare_policies(
    policies: &[(&str, &dyn ActionSource)],
    model: &SystemModel,
    sim: &SimConfig,
) -> Result<Comparison> {
    let results = policies
        .iter()
        .map(|(name, src)| Ok((name.to_string(), simulate(*src, model, sim)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[a].1.overall_mean.total_cmp(&results[b].1.overall_mean).then(a.cmp(&b)));
    let ranking = order.iter().map(|&i| results[i].0.clone()).collect();
    let mut differences = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            let d: Vec<f64> = results[i]
                .1
                .replication_means
                .iter()
                .zip(&results[j].1.replication_means)
                .map(|(a, b)| a - b)
                .collect();
            let (mean_diff, std_error) = mean_and_se(&d);
            differences.push(PairwiseDifference {
                first: results[i].0.clone(),
                second: results[j].0.clone(),
                mean_diff,
                std_error,
            });
        }
    }
    Ok(Comparison { results, ranking, differences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{default_base_scheduling, solve_decomposed};
    use crate::exact::{extract_policy, rvia_solve, SolverConfig};
    use crate::model::{DeviceParams, ModelVariant, SystemConfig};

    fn model(devices: Vec<DeviceParams>, m: usize) -> SystemModel {
        SystemModel::new(SystemConfig::new(devices, m, ModelVariant::GenerateAtWill).unwrap()).unwrap()
    }

    #[test]
    fn idle_fleet_saturates() {
        let m = model(vec![DeviceParams::uniform(3, 0.5, 10)], 0);
        let sim = SimConfig { horizon: 10_000, burn_in: 100, replications: 2, ..Default::default() };
        let r = simulate(&IdlePolicy, &m, &sim).unwrap();
        assert_eq!(r.overall_mean, 10.0);
        assert_eq!(r.std_error, 0.0);
    }

    #[test]
    fn reliable_cycle_mean() {
        let m = model(vec![DeviceParams::uniform(2, 1.0, 10)], 1);
        let v = rvia_solve(&m, &SolverConfig::default()).unwrap();
        let p = extract_policy(&m, &v).unwrap();
        let sim = SimConfig { horizon: 10_000, replications: 2, ..Default::default() };
        let r = simulate(&TablePolicy(&p), &m, &sim).unwrap();
        assert!((r.overall_mean - 2.5).abs() < 0.01, "{}", r.overall_mean);
    }

    #[test]
    fn reproducible_and_common_random_numbers() {
        let m = model(vec![DeviceParams::uniform(3, 0.6, 6), DeviceParams::uniform(2, 0.8, 6)], 1);
        let sol = solve_decomposed(&m, &default_base_scheduling(m.config()), &SolverConfig::default()).unwrap();
        let sim = SimConfig { horizon: 2_000, burn_in: 100, replications: 4, seed: 7, trajectory_slots: 500 };
        let a = simulate(&BasePolicy(&sol), &m, &sim).unwrap();
        let b = simulate(&BasePolicy(&sol), &m, &sim).unwrap();
        assert_eq!(a, b);
        let cmp =
            compare_policies(&[("x", &SuboptimalPolicy(&sol)), ("y", &SuboptimalPolicy(&sol))], &m, &sim).unwrap();
        assert_eq!(cmp.differences[0].mean_diff, 0.0);

        let tr = a.trajectory.unwrap();
        assert_eq!(tr.len(), 500);
        for w in tr.windows(2) {
            for (now, before) in w[1].iter().zip(&w[0]) {
                assert!(*now <= 6 && *now <= before + 1);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let m = model(vec![DeviceParams::uniform(2, 1.0, 3)], 1);
        let sim = SimConfig { horizon: 10, burn_in: 10, ..Default::default() };
        assert!(matches!(simulate(&IdlePolicy, &m, &sim), Err(Error::InvalidConfig(_))));
    }
}
