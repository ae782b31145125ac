//! Group-relative policy optimisation over SDE transitions.
//!
//! Advantages are normalised inside cohorts (one group at one transition),
//! the surrogate is the PPO clipped ratio with an optional per-step weight,
//! and a closed-form kernel KL keeps the policy near a frozen reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, AdamConfig, AdamState, GradSet, Mat, Network, ParamEntry, ParamSet, Tape, Var};
use crate::branching::{branch_group_with_noise, branch_noise, group_initial_state, per_step_branch_rewards};
use crate::error::{Error, Result};
use crate::flowmodel::{ode_batch, DataSpec, StepKind, StepMeta, Trajectory};
use crate::rewards::Reward;
use crate::rng::{normal_mat, normal_vec, SeedTree};
use crate::stats::{mean, pop_std};
use crate::stochastic::{kl_with_sigma, log_prob, sde_step_batch, NoiseSchedule};

pub const DEFAULT_ADV_GUARD: f64 = 1e-8;

/// `sigma_i * sqrt(dt_i)` divided by its mean over the grid.
pub fn noise_weights(schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let levels = schedule.noise_levels();
    let m = mean(&levels);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Degenerate("every transition has zero noise".into()));
    }
    Ok(levels.iter().map(|l| l / m).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    GroupwiseStd,
    /// Per-group mean, std pooled over the whole batch.
    GlobalStd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    NoiseAware,
}

/// How rollouts are generated and which transitions are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Full SDE trajectories, independent `x_T`, terminal reward on every step.
    FullSde,
    /// ODE-SDE-ODE groups, one branch step per group.
    SingleBranch,
    /// Full SDE trajectories from a shared `x_T` with branch-completed
    /// rewards on every `branch_reward_stride`-th step.
    PerStepBranchReward,
}

/// `(R - mean_g) / max(std, guard)` per group. Population std.
pub fn compute_advantages(groups: &[Vec<f64>], mode: AdvMode, guard: f64) -> Result<Vec<Vec<f64>>> {
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::contract("every group needs at least 2 rewards"));
    }
    if groups.iter().flatten().any(|r| !r.is_finite()) {
        return Err(Error::numeric("reward"));
    }
    let pooled = match mode {
        AdvMode::GlobalStd => {
            let all: Vec<f64> = groups.iter().flatten().copied().collect();
            Some(pop_std(&all))
        }
        AdvMode::GroupwiseStd => None,
    };
    Ok(groups
        .iter()
        .map(|g| {
            let m = mean(g);
            let s = pooled.unwrap_or_else(|| pop_std(g)).max(guard);
            g.iter().map(|r| (r - m) / s).collect()
        })
        .collect())
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip_eps: f64) -> f64 {
    let a = ratio * adv;
    let b = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
    if a <= b {
        a
    } else {
        b
    }
}

/// Weighted clipped-surrogate loss over flat per-transition arrays.
pub fn policy_loss(new_logps: &[f64], old_logps: &[f64], adv: &[f64], weights: &[f64], clip_eps: f64) -> Result<f64> {
    let n = new_logps.len();
    if n == 0 || old_logps.len() != n || adv.len() != n || weights.len() != n {
        return Err(Error::contract("policy loss inputs must be non-empty and congruent"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let r = (new_logps[i] - old_logps[i]).exp();
        if !r.is_finite() {
            return Err(Error::numeric(format!("probability ratio at transition {i}")));
        }
        total += weights[i] * clipped_surrogate(r, adv[i], clip_eps);
    }
    Ok(-total / n as f64)
}

/// Rollouts of one condition plus their credited rewards.
///
/// `policy_steps` lists the transitions trained for this group; `rewards`,
/// `advantages` and `old_logps` are indexed `[rollout][j]` for
/// `policy_steps[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub condition: usize,
    pub rollouts: Vec<Trajectory>,
    pub terminal_rewards: Vec<f64>,
    pub policy_steps: Vec<usize>,
    pub rewards: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub old_logps: Vec<Vec<f64>>,
}

impl RolloutGroup {
    fn build(
        condition: usize,
        rollouts: Vec<Trajectory>,
        terminal_rewards: Vec<f64>,
        policy_steps: Vec<usize>,
        rewards: Vec<Vec<f64>>,
    ) -> Self {
        let old_logps = rollouts
            .iter()
            .map(|tr| {
                policy_steps
                    .iter()
                    .map(|&k| tr.steps.get(k).and_then(|s| s.logp).unwrap_or(f64::NAN))
                    .collect()
            })
            .collect();
        let advantages = rewards.iter().map(|r| vec![0.0; r.len()]).collect();
        RolloutGroup {
            condition,
            rollouts,
            terminal_rewards,
            policy_steps,
            rewards,
            advantages,
            old_logps,
        }
    }

    /// Terminal reward credited to every listed step.
    pub fn with_terminal_rewards(
        condition: usize,
        rollouts: Vec<Trajectory>,
        rewards: Vec<f64>,
        steps: &[usize],
    ) -> Self {
        let credited = rewards.iter().map(|r| vec![*r; steps.len()]).collect();
        Self::build(condition, rollouts, rewards, steps.to_vec(), credited)
    }

    /// Branch rollouts: the final reward is the branch reward of `steps`.
    pub fn with_branch_rewards(
        condition: usize,
        rollouts: Vec<Trajectory>,
        rewards: Vec<f64>,
        steps: &[usize],
    ) -> Self {
        Self::with_terminal_rewards(condition, rollouts, rewards, steps)
    }

    /// Explicit per-rollout, per-step rewards.
    pub fn with_step_rewards(
        condition: usize,
        rollouts: Vec<Trajectory>,
        terminal_rewards: Vec<f64>,
        steps: &[usize],
        rewards: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if rewards.len() != rollouts.len() || rewards.iter().any(|r| r.len() != steps.len()) {
            return Err(Error::contract("step rewards must be [rollout][step]"));
        }
        Ok(Self::build(
            condition,
            rollouts,
            terminal_rewards,
            steps.to_vec(),
            rewards,
        ))
    }

    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    /// Rewards of cohort `j` across the group.
    pub fn cohort(&self, j: usize) -> Vec<f64> {
        self.rewards.iter().map(|r| r[j]).collect()
    }
}

/// Fills advantages cohort by cohort. Groups must share `policy_steps`
/// length; cohort `j` of every group is normalised together under
/// `GlobalStd`.
pub fn normalize_groups(groups: &mut [RolloutGroup], mode: AdvMode, guard: f64) -> Result<()> {
    let Some(first) = groups.first() else {
        return Ok(());
    };
    let width = first.policy_steps.len();
    if groups.iter().any(|g| g.policy_steps.len() != width) {
        return Err(Error::contract("groups train different numbers of steps"));
    }
    for j in 0..width {
        let cohorts: Vec<Vec<f64>> = groups.iter().map(|g| g.cohort(j)).collect();
        let adv = compute_advantages(&cohorts, mode, guard)?;
        for (g, a) in groups.iter_mut().zip(adv) {
            for (row, v) in g.advantages.iter_mut().zip(a) {
                row[j] = v;
            }
        }
    }
    Ok(())
}

/// Flat transition batch for the policy objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBatch {
    pub x_from: Mat,
    pub x_to: Mat,
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
    pub sigma: Vec<f64>,
    pub old_logps: Vec<f64>,
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PolicyBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn from_groups(groups: &[RolloutGroup], schedule: &NoiseSchedule, weights: &[f64]) -> Result<Self> {
        if weights.len() != schedule.num_transitions() {
            return Err(Error::contract("one weight per transition expected"));
        }
        let mut from = Vec::new();
        let mut to = Vec::new();
        let mut b = PolicyBatch {
            x_from: Mat::zeros(0, 0),
            x_to: Mat::zeros(0, 0),
            t: vec![],
            dt: vec![],
            sigma: vec![],
            old_logps: vec![],
            advantages: vec![],
            weights: vec![],
        };
        for g in groups {
            for (i, tr) in g.rollouts.iter().enumerate() {
                for (j, &k) in g.policy_steps.iter().enumerate() {
                    let meta = &tr.steps[k];
                    let old = g.old_logps[i][j];
                    if meta.kind != StepKind::Sde || !old.is_finite() {
                        return Err(Error::contract(format!("step {k} has no recorded log-probability")));
                    }
                    let (t, dt, s) = schedule.transition(k);
                    from.push(tr.states[k].clone());
                    to.push(tr.states[k + 1].clone());
                    b.t.push(t);
                    b.dt.push(dt);
                    b.sigma.push(s);
                    b.old_logps.push(old);
                    b.advantages.push(g.advantages[i][j]);
                    b.weights.push(weights[k]);
                }
            }
        }
        if from.is_empty() {
            return Err(Error::contract("empty policy batch"));
        }
        b.x_from = Mat::from_rows(&from);
        b.x_to = Mat::from_rows(&to);
        Ok(b)
    }

    /// Sub-batch of the given rows.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let pick_m = |m: &Mat| Mat::from_rows(&rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>());
        PolicyBatch {
            x_from: pick_m(&self.x_from),
            x_to: pick_m(&self.x_to),
            t: pick(&self.t),
            dt: pick(&self.dt),
            sigma: pick(&self.sigma),
            old_logps: pick(&self.old_logps),
            advantages: pick(&self.advantages),
            weights: pick(&self.weights),
        }
    }
}

/// Mean closed-form kernel KL over the batch's transitions.
pub fn kl_loss(net: &Network, params: &ParamSet, reference: &ParamSet, batch: &PolicyBatch) -> Result<f64> {
    let v = net.forward_batch(params, &batch.x_from, &batch.t)?;
    let vr = net.forward_batch(reference, &batch.x_from, &batch.t)?;
    let mut total = 0.0;
    for r in 0..batch.len() {
        total += kl_with_sigma(v.row(r), vr.row(r), batch.t[r], batch.dt[r], batch.sigma[r])?;
    }
    Ok(total / batch.len() as f64)
}

/// New-policy log-probabilities of the batch transitions.
pub fn batch_logps(net: &Network, params: &ParamSet, batch: &PolicyBatch) -> Result<Vec<f64>> {
    let v = net.forward_batch(params, &batch.x_from, &batch.t)?;
    let mut mu = vec![0.0; batch.x_from.cols];
    (0..batch.len())
        .map(|r| {
            crate::stochastic::mean_from_velocity(
                batch.x_from.row(r),
                v.row(r),
                batch.t[r],
                batch.dt[r],
                batch.sigma[r],
                &mut mu,
            );
            log_prob(&mu, batch.sigma[r] * batch.dt[r].sqrt(), batch.x_to.row(r))
        })
        .collect()
}

/// Clipped, weighted surrogate loss as a function of the velocity node `v`
/// (one row per batch transition).
fn surrogate_on_tape(tape: &mut Tape, v: Var, batch: &PolicyBatch, clip_eps: f64) -> Result<Var> {
    let n = batch.len();
    let d = batch.x_from.cols;
    let mut resid = Mat::zeros(n, d);
    let mut b_col = vec![0.0; n];
    let mut inv_var = vec![0.0; n];
    let mut offset = vec![0.0; n];
    for r in 0..n {
        let (t, dt, s) = (batch.t[r], batch.dt[r], batch.sigma[r]);
        let c = s * s / (2.0 * t);
        let var = s * s * dt;
        if !(var > 0.0) {
            return Err(Error::domain(format!("transition {r} has zero noise")));
        }
        for j in 0..d {
            resid.row_mut(r)[j] = batch.x_to.get(r, j) - batch.x_from.get(r, j) * (1.0 - c * dt);
        }
        b_col[r] = dt * (1.0 + c * (1.0 - t));
        inv_var[r] = -0.5 / var;
        let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln();
        offset[r] = norm - batch.old_logps[r];
    }

    // x_to - mu = resid + dt (1 + c (1 - t)) v
    let bc = tape.constant(Mat::column(&b_col));
    let bv = tape.mul_col(v, bc);
    let res = tape.constant(resid);
    let diff = tape.add(res, bv);
    let sq = tape.row_sq_norm(diff);
    let iv = tape.constant(Mat::column(&inv_var));
    let q = tape.mul(sq, iv);
    let off = tape.constant(Mat::column(&offset));
    let log_ratio = tape.add(q, off);
    let ratio = tape.exp(log_ratio);
    if let Some(i) = tape.value(ratio).data.iter().position(|r| !r.is_finite()) {
        return Err(Error::numeric(format!("probability ratio at transition {i}")));
    }
    let adv = tape.constant(Mat::column(&batch.advantages));
    let unclipped = tape.mul(ratio, adv);
    let clipped_r = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.mul(clipped_r, adv);
    let surr = tape.min(unclipped, clipped);
    let w = tape.constant(Mat::column(&batch.weights));
    let weighted = tape.mul(surr, w);
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Value and gradient of `policy loss + beta * KL`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: f64,
    pub policy: f64,
    pub kl: Option<f64>,
    pub grads: GradSet,
}

/// Records the objective on a tape. The kernel mean is affine in the
/// velocity, `mu = x (1 - c dt) - dt (1 + c (1 - t)) v` with
/// `c = sigma^2 / (2t)`, so only `v` carries parameters.
pub fn policy_objective(
    net: &Network,
    params: &ParamSet,
    reference: Option<&ParamSet>,
    batch: &PolicyBatch,
    clip_eps: f64,
    beta: f64,
) -> Result<Objective> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::contract("empty policy batch"));
    }
    if beta > 0.0 && reference.is_none() {
        return Err(Error::contract("KL term needs reference parameters"));
    }
    let mut tape = Tape::new();
    let pv = tape.params(params);
    let v = net.forward_tape(&mut tape, &pv, &batch.x_from, &batch.t)?;
    let policy = surrogate_on_tape(&mut tape, v, batch, clip_eps)?;
    let policy_value = tape.value(policy).as_scalar();

    let mut kl_value = None;
    let total = if beta > 0.0 {
        let reference = reference.unwrap();
        let vref = net.forward_batch(reference, &batch.x_from, &batch.t)?;
        let coef: Vec<f64> = (0..n)
            .map(|r| {
                let (t, dt, s) = (batch.t[r], batch.dt[r], batch.sigma[r]);
                let k = s * (1.0 - t) / (2.0 * t) + 1.0 / s;
                0.5 * dt * k * k / n as f64
            })
            .collect();
        let vr = tape.constant(vref);
        let dv = tape.sub(v, vr);
        let dsq = tape.row_sq_norm(dv);
        let cc = tape.constant(Mat::column(&coef));
        let per = tape.mul(dsq, cc);
        let kl = tape.sum(per);
        kl_value = Some(tape.value(kl).as_scalar());
        let scaled = tape.scale(kl, beta);
        tape.add(policy, scaled)
    } else {
        policy
    };
    let total_value = tape.value(total).as_scalar();
    let grads = tape.backward(total, params)?;
    Ok(Objective {
        total: total_value,
        policy: policy_value,
        kl: kl_value,
        grads,
    })
}

/// Gradient of the policy loss with respect to the velocity outputs, one
/// row per batch transition, evaluated at `params`.
pub fn velocity_gradient(net: &Network, params: &ParamSet, batch: &PolicyBatch, clip_eps: f64) -> Result<Mat> {
    if batch.is_empty() {
        return Err(Error::contract("empty policy batch"));
    }
    let v = net.forward_batch(params, &batch.x_from, &batch.t)?;
    let leaf = ParamSet::new(vec![ParamEntry::new("v", vec![v.rows, v.cols], v.data.clone())?])?;
    let mut tape = Tape::new();
    let vv = tape.params(&leaf)[0];
    let loss = surrogate_on_tape(&mut tape, vv, batch, clip_eps)?;
    let g = tape.backward(loss, &leaf)?;
    Ok(g.entries()[0].to_mat())
}

/// Training hyperparameters. Presets differ only in `adv_mode`,
/// `weight_mode` and `rollout_mode`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub num_groups: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub adv_mode: AdvMode,
    pub weight_mode: WeightMode,
    pub rollout_mode: RolloutMode,
    /// Draw branch steps from the noise weights instead of cycling.
    pub branch_bias_early: bool,
    pub branch_reward_stride: usize,
    pub lr: f64,
    pub inner_epochs: usize,
    pub adv_guard: f64,
    pub iterations: usize,
    pub eval_samples: usize,
}

pub const PRESETS: [&str; 4] = ["flow-grpo", "flow-grpo-fixed", "branch", "tempflow"];

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            num_groups: 8,
            clip_eps: 0.2,
            beta: 0.0,
            adv_mode: AdvMode::GroupwiseStd,
            weight_mode: WeightMode::NoiseAware,
            rollout_mode: RolloutMode::SingleBranch,
            branch_bias_early: false,
            branch_reward_stride: 1,
            lr: 1e-3,
            inner_epochs: 1,
            adv_guard: DEFAULT_ADV_GUARD,
            iterations: 300,
            eval_samples: 1024,
        }
    }
}

impl GrpoConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = GrpoConfig::default();
        let (adv_mode, weight_mode, rollout_mode) = match name {
            "flow-grpo" => (AdvMode::GlobalStd, WeightMode::Uniform, RolloutMode::FullSde),
            "flow-grpo-fixed" => (AdvMode::GroupwiseStd, WeightMode::Uniform, RolloutMode::FullSde),
            "branch" => (AdvMode::GroupwiseStd, WeightMode::Uniform, RolloutMode::SingleBranch),
            "tempflow" => (AdvMode::GroupwiseStd, WeightMode::NoiseAware, RolloutMode::SingleBranch),
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}`, expected one of {}", PRESETS.join(", ")),
                ))
            }
        };
        Ok(GrpoConfig {
            adv_mode,
            weight_mode,
            rollout_mode,
            ..base
        })
    }

    /// Applies only the fields a preset controls.
    pub fn with_preset(&self, name: &str) -> Result<Self> {
        let p = Self::preset(name)?;
        Ok(GrpoConfig {
            adv_mode: p.adv_mode,
            weight_mode: p.weight_mode,
            rollout_mode: p.rollout_mode,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("grpo.group_size", "must be at least 2"));
        }
        if self.num_groups == 0 {
            return Err(Error::config("grpo.num_groups", "must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("grpo.clip_eps", "must lie in (0, 1)"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("grpo.beta", "must be finite and >= 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("grpo.lr", "must be finite and >= 0"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("grpo.inner_epochs", "must be positive"));
        }
        if self.branch_reward_stride == 0 {
            return Err(Error::config("grpo.branch_reward_stride", "must be positive"));
        }
        if !(self.adv_guard > 0.0) {
            return Err(Error::config("grpo.adv_guard", "must be positive"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("grpo.eval_samples", "must be positive"));
        }
        Ok(())
    }

    fn transition_weights(&self, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        match self.weight_mode {
            WeightMode::Uniform => Ok(vec![1.0; schedule.num_transitions()]),
            WeightMode::NoiseAware => noise_weights(schedule),
        }
    }
}

/// Full-SDE group: independent `x_T` per rollout unless `shared_x_t` is set.
pub fn full_sde_group(
    net: &Network,
    params: &ParamSet,
    condition: usize,
    g: usize,
    seeds: &SeedTree,
    schedule: &NoiseSchedule,
    shared_x_t: bool,
) -> Result<Vec<Trajectory>> {
    let d = net.state_dim;
    let x_ts: Vec<Vec<f64>> = if shared_x_t {
        vec![group_initial_state(seeds, condition, d); g]
    } else {
        (0..g)
            .map(|i| normal_vec(&mut seeds.stream(&format!("cond-{condition}-rollout-{i}-x_T")), d))
            .collect()
    };
    let n = schedule.num_transitions();
    let mut states: Vec<Vec<Vec<f64>>> = x_ts.iter().map(|x| vec![x.clone()]).collect();
    let mut steps: Vec<Vec<StepMeta>> = vec![Vec::with_capacity(n); g];
    let mut cur = Mat::from_rows(&x_ts);
    for k in 0..n {
        let (t, dt, s) = schedule.transition(k);
        let eps: Vec<Vec<f64>> = (0..g).map(|i| branch_noise(seeds, condition, i, k, d)).collect();
        let (means, next) = sde_step_batch(net, params, &cur, t, dt, s, &Mat::from_rows(&eps))?;
        let std = s * dt.sqrt();
        for i in 0..g {
            let logp = if std > 0.0 {
                Some(log_prob(means.row(i), std, next.row(i))?)
            } else {
                None
            };
            states[i].push(next.row(i).to_vec());
            steps[i].push(StepMeta {
                kind: StepKind::Sde,
                eps: Some(eps[i].clone()),
                logp,
            });
        }
        cur = next;
    }
    Ok(states
        .into_iter()
        .zip(steps)
        .map(|(states, steps)| Trajectory {
            states,
            times: schedule.times.clone(),
            steps,
        })
        .collect())
}

/// ODE-sample statistics on a fixed evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_reward: f64,
    pub occupancy: f64,
}

pub fn evaluate(
    net: &Network,
    params: &ParamSet,
    x_ts: &Mat,
    schedule: &NoiseSchedule,
    reward: &Reward,
    data: &DataSpec,
) -> Result<EvalStats> {
    let x0 = ode_batch(net, params, x_ts, schedule, 0)?;
    let mut total = 0.0;
    let mut hits = 0usize;
    for r in 0..x0.rows {
        total += reward.eval(x0.row(r));
        if reward.occupies(x0.row(r), data) {
            hits += 1;
        }
    }
    Ok(EvalStats {
        mean_reward: total / x0.rows as f64,
        occupancy: hits as f64 / x0.rows as f64,
    })
}

/// One row of training metrics, recorded after the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    /// Mean terminal reward of the training rollouts.
    pub mean_reward: f64,
    /// Mean within-group std of the credited rewards.
    pub reward_std: f64,
    pub kl: f64,
    pub loss: f64,
    pub mode_occupancy: f64,
    pub eval_reward: f64,
    /// Branch step of the first group, `None` for full-SDE rollouts.
    pub branch_step: Option<usize>,
    pub weight_hash: String,
}

pub const METRICS_HEADER: &str =
    "iter,mean_reward,reward_std,kl,loss,mode_occupancy,eval_reward,branch_step,weight_hash";

impl IterMetrics {
    pub fn csv_row(&self) -> String {
        use crate::flowmodel::fmt_f64;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            fmt_f64(self.mean_reward),
            fmt_f64(self.reward_std),
            fmt_f64(self.kl),
            fmt_f64(self.loss),
            fmt_f64(self.mode_occupancy),
            fmt_f64(self.eval_reward),
            self.branch_step.map_or_else(|| "-1".to_string(), |k| k.to_string()),
            self.weight_hash
        )
    }
}

pub fn metrics_csv(rows: &[IterMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// First 16 hex digits of the SHA-256 of the little-endian weight bytes.
pub fn weight_hash(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ParamSet,
    pub initial_eval: EvalStats,
    pub metrics: Vec<IterMetrics>,
}

/// Branch step of group `g` at iteration `it`: cycles through the grid,
/// or draws from the noise weights when biased.
pub fn branch_step_for(cfg: &GrpoConfig, schedule: &NoiseSchedule, seeds: &SeedTree, it: usize, g: usize) -> usize {
    let n = schedule.num_transitions();
    if cfg.branch_bias_early {
        if let Some(w) = &schedule.weights {
            use rand::distributions::{Distribution, WeightedIndex};
            if let Ok(dist) = WeightedIndex::new(w) {
                return dist.sample(&mut seeds.stream(&format!("iter-{it}-group-{g}-branch-step")));
            }
        }
    }
    (it * cfg.num_groups + g) % n
}

/// Rollouts and credited rewards for every group of one iteration.
pub fn collect_groups(
    net: &Network,
    params: &ParamSet,
    cfg: &GrpoConfig,
    schedule: &NoiseSchedule,
    reward: &Reward,
    seeds: &SeedTree,
    it: usize,
) -> Result<Vec<RolloutGroup>> {
    let iter_seeds = seeds.child(&format!("iter-{it}"));
    let n = schedule.num_transitions();
    let g = cfg.group_size;
    let d = net.state_dim;
    (0..cfg.num_groups)
        .into_par_iter()
        .map(|c| -> Result<RolloutGroup> {
            match cfg.rollout_mode {
                RolloutMode::FullSde => {
                    let rollouts = full_sde_group(net, params, c, g, &iter_seeds, schedule, false)?;
                    let rewards: Vec<f64> = rollouts.iter().map(|t| reward.eval(t.final_state())).collect();
                    let steps: Vec<usize> = (0..n).collect();
                    Ok(RolloutGroup::with_terminal_rewards(c, rollouts, rewards, &steps))
                }
                RolloutMode::SingleBranch => {
                    let k = branch_step_for(cfg, schedule, &iter_seeds, it, c);
                    let x_t = group_initial_state(&iter_seeds, c, d);
                    let eps: Vec<Vec<f64>> = (0..g).map(|i| branch_noise(&iter_seeds, c, i, k, d)).collect();
                    branch_group_with_noise(net, params, c, &x_t, k, &eps, schedule, reward)
                }
                RolloutMode::PerStepBranchReward => {
                    let rollouts = full_sde_group(net, params, c, g, &iter_seeds, schedule, true)?;
                    let terminal: Vec<f64> = rollouts.iter().map(|t| reward.eval(t.final_state())).collect();
                    let steps: Vec<usize> = (0..n).collect();
                    let subset: Vec<usize> = (0..n).filter(|k| k % cfg.branch_reward_stride == 0).collect();
                    let mut rewards = Vec::with_capacity(g);
                    for (tr, term) in rollouts.iter().zip(&terminal) {
                        let branch = per_step_branch_rewards(net, params, tr, schedule, reward, &subset)?;
                        let mut row = vec![*term; n];
                        for (&k, r) in subset.iter().zip(branch) {
                            row[k] = r;
                        }
                        rewards.push(row);
                    }
                    RolloutGroup::with_step_rewards(c, rollouts, terminal, &steps, rewards)
                }
            }
        })
        .collect()
}

/// Fixed ODE evaluation inputs shared by every run with the same seed.
pub fn eval_inputs(seeds: &SeedTree, n: usize, dim: usize) -> Mat {
    normal_mat(&mut seeds.stream("eval-x_T"), n, dim)
}

/// GRPO fine-tuning from `init`, which also serves as the KL reference.
/// `on_iter` runs after every update; returning an error aborts training.
#[allow(clippy::too_many_arguments)]
pub fn train_with_callback(
    net: &Network,
    init: &ParamSet,
    cfg: &GrpoConfig,
    schedule: &NoiseSchedule,
    reward: &Reward,
    data: &DataSpec,
    seeds: &SeedTree,
    on_iter: &mut dyn FnMut(&IterMetrics, &ParamSet) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    net.check_params(init)?;
    let weights = cfg.transition_weights(schedule)?;
    let hash = weight_hash(&weights);
    let eval_x = eval_inputs(seeds, cfg.eval_samples, net.state_dim);
    let initial_eval = evaluate(net, init, &eval_x, schedule, reward, data)?;
    let reference = init.clone();
    let mut params = init.clone();
    let mut adam = AdamState::new(&params);
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let wrap = |e: Error| match e {
            Error::Training { .. } => e,
            other => Error::Training {
                step: it,
                message: other.to_string(),
            },
        };
        let mut groups = collect_groups(net, &params, cfg, schedule, reward, seeds, it).map_err(wrap)?;
        normalize_groups(&mut groups, cfg.adv_mode, cfg.adv_guard).map_err(wrap)?;
        let batch = PolicyBatch::from_groups(&groups, schedule, &weights).map_err(wrap)?;
        let mut first: Option<Objective> = None;
        for _ in 0..cfg.inner_epochs {
            let obj = policy_objective(net, &params, Some(&reference), &batch, cfg.clip_eps, cfg.beta).map_err(wrap)?;
            if !obj.total.is_finite() {
                return Err(Error::Training {
                    step: it,
                    message: "objective is not finite".into(),
                });
            }
            if cfg.lr > 0.0 {
                adam_step(&mut params, &obj.grads, &mut adam, &AdamConfig::with_lr(cfg.lr)).map_err(wrap)?;
            }
            if first.is_none() {
                first = Some(obj);
            }
        }
        let obj = first.expect("at least one inner epoch");
        let kl = match obj.kl {
            Some(k) => k,
            None => kl_loss(net, &params, &reference, &batch).map_err(wrap)?,
        };
        let ev = evaluate(net, &params, &eval_x, schedule, reward, data).map_err(wrap)?;
        let terminal: Vec<f64> = groups.iter().flat_map(|g| g.terminal_rewards.iter().copied()).collect();
        let mut stds = Vec::new();
        for g in &groups {
            for j in 0..g.policy_steps.len() {
                stds.push(pop_std(&g.cohort(j)));
            }
        }
        let row = IterMetrics {
            iter: it,
            mean_reward: mean(&terminal),
            reward_std: mean(&stds),
            kl,
            loss: obj.total,
            mode_occupancy: ev.occupancy,
            eval_reward: ev.mean_reward,
            branch_step: match cfg.rollout_mode {
                RolloutMode::SingleBranch => groups.first().map(|g| g.policy_steps[0]),
                _ => None,
            },
            weight_hash: hash.clone(),
        };
        on_iter(&row, &params)?;
        metrics.push(row);
    }
    Ok(TrainResult {
        params,
        initial_eval,
        metrics,
    })
}

pub fn train(
    net: &Network,
    init: &ParamSet,
    cfg: &GrpoConfig,
    schedule: &NoiseSchedule,
    reward: &Reward,
    data: &DataSpec,
    seeds: &SeedTree,
) -> Result<TrainResult> {
    train_with_callback(net, init, cfg, schedule, reward, data, seeds, &mut |_, _| Ok(()))
}
