//! Trajectory branching: deterministic rollouts with stochasticity at chosen
//! transitions, branch-completed process rewards and reward-spread profiles.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Network, ParamSet};
use crate::error::{Error, Result};
use crate::flowmodel::{ode_batch, ode_step, ode_step_batch, StepKind, StepMeta, Trajectory};
use crate::grpo::RolloutGroup;
use crate::rewards::Reward;
use crate::rng::{normal_vec, SeedTree};
use crate::stats::{mean, pop_std};
use crate::stochastic::{log_prob, sde_step, sde_step_batch, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    SingleBranch,
    PerStepBranchReward,
}

/// Which transitions are stochastic inside an otherwise deterministic rollout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    branch_steps: BTreeSet<usize>,
    mode: BranchMode,
}

impl BranchSpec {
    pub fn new(steps: impl IntoIterator<Item = usize>, mode: BranchMode, num_transitions: usize) -> Result<Self> {
        let branch_steps: BTreeSet<usize> = steps.into_iter().collect();
        if branch_steps.is_empty() {
            return Err(Error::contract("branch spec needs at least one step"));
        }
        if let Some(&bad) = branch_steps.iter().find(|&&k| k >= num_transitions) {
            return Err(Error::contract(format!(
                "branch step {bad} outside grid of {num_transitions} transitions"
            )));
        }
        if mode == BranchMode::SingleBranch && branch_steps.len() != 1 {
            return Err(Error::contract("single_branch mode takes exactly one step"));
        }
        Ok(BranchSpec { branch_steps, mode })
    }

    pub fn single(k: usize, num_transitions: usize) -> Result<Self> {
        Self::new([k], BranchMode::SingleBranch, num_transitions)
    }

    pub fn steps(&self) -> &BTreeSet<usize> {
        &self.branch_steps
    }

    pub fn mode(&self) -> BranchMode {
        self.mode
    }

    pub fn contains(&self, k: usize) -> bool {
        self.branch_steps.contains(&k)
    }
}

/// A rollout that is stochastic only at `branch_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchRollout {
    pub trajectory: Trajectory,
    pub branch_index: usize,
    pub eps_at_branch: Vec<f64>,
    pub reward: f64,
}

fn check_branch(k: usize, eps: &[f64], x_t: &[f64], schedule: &NoiseSchedule) -> Result<()> {
    if k >= schedule.num_transitions() {
        return Err(Error::contract(format!(
            "branch step {k} outside grid of {} transitions",
            schedule.num_transitions()
        )));
    }
    if eps.len() != x_t.len() {
        return Err(Error::contract("branch noise dimension does not match state"));
    }
    Ok(())
}

/// ODE up to `k`, one SDE step at `k` with the given noise, ODE afterwards.
pub fn branch_rollout(
    net: &Network,
    params: &ParamSet,
    x_t: &[f64],
    k: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
    reward: &Reward,
) -> Result<BranchRollout> {
    check_branch(k, eps, x_t, schedule)?;
    let mut states = vec![x_t.to_vec()];
    let mut steps = Vec::with_capacity(schedule.num_transitions());
    for i in 0..schedule.num_transitions() {
        let (t, dt, s) = schedule.transition(i);
        let cur = states.last().unwrap();
        if i == k {
            let tr = sde_step(net, params, cur, t, dt, s, eps)?;
            let logp = if tr.std_scalar > 0.0 {
                Some(tr.log_prob()?)
            } else {
                None
            };
            steps.push(StepMeta {
                kind: StepKind::Sde,
                eps: Some(eps.to_vec()),
                logp,
            });
            states.push(tr.x_to);
        } else {
            states.push(ode_step(net, params, cur, t, dt)?);
            steps.push(StepMeta::ode());
        }
    }
    let trajectory = Trajectory {
        states,
        times: schedule.times.clone(),
        steps,
    };
    let reward = reward.eval(trajectory.final_state());
    Ok(BranchRollout {
        trajectory,
        branch_index: k,
        eps_at_branch: eps.to_vec(),
        reward,
    })
}

/// Noise for rollout `i` at step `k` of a group, from its own labelled stream.
pub fn branch_noise(seeds: &SeedTree, condition: usize, rollout: usize, k: usize, dim: usize) -> Vec<f64> {
    normal_vec(
        &mut seeds.stream(&format!("cond-{condition}-rollout-{rollout}-eps-step-{k}")),
        dim,
    )
}

/// Shared initial noise of a condition's group.
pub fn group_initial_state(seeds: &SeedTree, condition: usize, dim: usize) -> Vec<f64> {
    normal_vec(&mut seeds.stream(&format!("cond-{condition}-x_T")), dim)
}

/// `G` branch rollouts at step `k` from one shared `x_T`, with explicit noise.
/// Equivalent to calling [`branch_rollout`] per noise vector, batched.
pub fn branch_group_with_noise(
    net: &Network,
    params: &ParamSet,
    condition: usize,
    x_t: &[f64],
    k: usize,
    eps: &[Vec<f64>],
    schedule: &NoiseSchedule,
    reward: &Reward,
) -> Result<RolloutGroup> {
    let g = eps.len();
    if g < 2 {
        return Err(Error::contract("group size must be at least 2"));
    }
    for e in eps {
        check_branch(k, e, x_t, schedule)?;
    }
    // shared deterministic prefix
    let mut prefix = vec![x_t.to_vec()];
    for i in 0..k {
        let (t, dt, _) = schedule.transition(i);
        let next = ode_step(net, params, prefix.last().unwrap(), t, dt)?;
        prefix.push(next);
    }
    let x_k = prefix.last().unwrap().clone();
    let (t, dt, s) = schedule.transition(k);
    let xs = Mat::from_rows(&vec![x_k; g]);
    let noise = Mat::from_rows(eps);
    let (means, after) = sde_step_batch(net, params, &xs, t, dt, s, &noise)?;
    let std_scalar = s * dt.sqrt();

    // keep every intermediate state of the tail
    let mut tail_states: Vec<Mat> = vec![after.clone()];
    let mut cur = after;
    for i in k + 1..schedule.num_transitions() {
        let (t, dt, _) = schedule.transition(i);
        cur = ode_step_batch(net, params, &cur, t, dt)?;
        tail_states.push(cur.clone());
    }

    let mut rollouts = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    for r in 0..g {
        let mut states = prefix.clone();
        for m in &tail_states {
            states.push(m.row(r).to_vec());
        }
        let mut steps = vec![StepMeta::ode(); schedule.num_transitions()];
        let logp = if std_scalar > 0.0 {
            Some(log_prob(means.row(r), std_scalar, &states[k + 1])?)
        } else {
            None
        };
        steps[k] = StepMeta {
            kind: StepKind::Sde,
            eps: Some(eps[r].clone()),
            logp,
        };
        let traj = Trajectory {
            states,
            times: schedule.times.clone(),
            steps,
        };
        rewards.push(reward.eval(traj.final_state()));
        rollouts.push(traj);
    }
    Ok(RolloutGroup::with_branch_rewards(condition, rollouts, rewards, &[k]))
}

/// Group of `g` branch rollouts sharing `x_T` (drawn once for the condition)
/// and the branch step, each with independent noise at `k`.
#[allow(clippy::too_many_arguments)]
pub fn group_branch_rollouts(
    net: &Network,
    params: &ParamSet,
    condition: usize,
    k: usize,
    g: usize,
    seeds: &SeedTree,
    schedule: &NoiseSchedule,
    reward: &Reward,
) -> Result<RolloutGroup> {
    if g < 2 {
        return Err(Error::contract(
            "group size must be at least 2 (std undefined otherwise)",
        ));
    }
    let d = net.state_dim;
    let x_t = group_initial_state(seeds, condition, d);
    let eps: Vec<Vec<f64>> = (0..g).map(|i| branch_noise(seeds, condition, i, k, d)).collect();
    branch_group_with_noise(net, params, condition, &x_t, k, &eps, schedule, reward)
}

/// Per-transition reward spread: for every `k`, the mean over conditions of the
/// population std of `G` branch rewards.
pub fn reward_std_profile(
    net: &Network,
    params: &ParamSet,
    conditions: &[usize],
    g: usize,
    seeds: &SeedTree,
    schedule: &NoiseSchedule,
    reward: &Reward,
) -> Result<RewardProfile> {
    if conditions.is_empty() {
        return Err(Error::contract("profile needs at least one condition"));
    }
    let per_step: Vec<(f64, f64)> = (0..schedule.num_transitions())
        .into_par_iter()
        .map(|k| {
            let mut stds = Vec::with_capacity(conditions.len());
            let mut means = Vec::with_capacity(conditions.len());
            for &c in conditions {
                let group = group_branch_rollouts(net, params, c, k, g, seeds, schedule, reward)?;
                stds.push(pop_std(&group.terminal_rewards));
                means.push(mean(&group.terminal_rewards));
            }
            Ok((mean(&stds), mean(&means)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardProfile {
        times: schedule.times[..schedule.num_transitions()].to_vec(),
        sigmas: schedule.sigmas.clone(),
        noise_levels: schedule.noise_levels(),
        reward_std: per_step.iter().map(|p| p.0).collect(),
        reward_mean: per_step.iter().map(|p| p.1).collect(),
    })
}

/// Output of [`reward_std_profile`], one entry per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardProfile {
    pub times: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub reward_std: Vec<f64>,
    pub reward_mean: Vec<f64>,
}

impl RewardProfile {
    /// Columns `step_index,t,sigma,reward_std,reward_mean`.
    pub fn to_csv(&self) -> String {
        use crate::flowmodel::fmt_f64;
        let mut out = String::from("step_index,t,sigma,reward_std,reward_mean\n");
        for k in 0..self.reward_std.len() {
            out.push_str(&format!(
                "{k},{},{},{},{}\n",
                fmt_f64(self.times[k]),
                fmt_f64(self.sigmas[k]),
                fmt_f64(self.reward_std[k]),
                fmt_f64(self.reward_mean[k])
            ));
        }
        out
    }
}

/// `R(ODE(SDE(x_k, eps_k)))` for each requested step, reusing the
/// trajectory's own post-noise state `x_{k+1}` and completing deterministically.
pub fn per_step_branch_rewards(
    net: &Network,
    params: &ParamSet,
    trajectory: &Trajectory,
    schedule: &NoiseSchedule,
    reward: &Reward,
    step_subset: &[usize],
) -> Result<Vec<f64>> {
    let n = schedule.num_transitions();
    if trajectory.steps.len() != n {
        return Err(Error::contract("trajectory does not match schedule"));
    }
    step_subset
        .iter()
        .map(|&k| {
            let meta = trajectory
                .steps
                .get(k)
                .ok_or_else(|| Error::contract(format!("step {k} outside trajectory")))?;
            if meta.kind != StepKind::Sde || meta.eps.is_none() {
                return Err(Error::contract(format!("step {k} has no stored noise")));
            }
            let start = Mat::row_vector(&trajectory.states[k + 1]);
            let end = ode_batch(net, params, &start, schedule, k + 1)?;
            Ok(reward.eval(end.row(0)))
        })
        .collect()
}
