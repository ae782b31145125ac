//! Numerical checks of how per-step policy gradients scale with the noise
//! schedule, and of the direction recovered by normalised advantages.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Network, ParamSet};
use crate::branching::{branch_group_with_noise, branch_noise, group_initial_state, RewardProfile};
use crate::error::{Error, Result};
use crate::flowmodel::{fmt_f64, ode_batch};
use crate::grpo::{
    normalize_groups, policy_objective, velocity_gradient, AdvMode, PolicyBatch, WeightMode, DEFAULT_ADV_GUARD,
};
use crate::rewards::Reward;
use crate::rng::{normal_mat, SeedTree};
use crate::stats::{mean, pearson, pop_std};
use crate::stochastic::{self, transition_mean, NoiseSchedule};

/// `sqrt(dk (1 - k) / k)`, or `dk` once noise-aware weights are applied.
pub fn scale_term(k: f64, dk: f64, reweighted: bool) -> Result<f64> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::domain(format!("scale term needs k in (0, 1), got {k}")));
    }
    if !(dk > 0.0) {
        return Err(Error::domain(format!("step size {dk} must be positive")));
    }
    Ok(if reweighted { dk } else { (dk * (1.0 - k) / k).sqrt() })
}

/// Same warp as the sampler's grid.
pub fn shifted_grid(num_steps: usize, shift: f64) -> Result<Vec<f64>> {
    stochastic::shifted_grid(num_steps, shift)
}

/// Per-transition scale terms, evaluated at each transition's noise time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub shift: f64,
    pub k: Vec<f64>,
    pub dk: Vec<f64>,
    pub raw: Vec<f64>,
    pub reweighted: Vec<f64>,
    /// `1/a + a/2`, common to every step.
    pub prefactor: f64,
    pub empirical: Option<EmpiricalScales>,
}

/// Seed-averaged empirical norms per step, without and with noise-aware
/// weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalScales {
    pub seeds: usize,
    pub uniform: Vec<GradientScale>,
    pub weighted: Vec<GradientScale>,
}

impl EmpiricalScales {
    pub fn uniform_output(&self) -> Vec<f64> {
        self.uniform.iter().map(|g| g.output_norm).collect()
    }

    pub fn weighted_output(&self) -> Vec<f64> {
        self.weighted.iter().map(|g| g.output_norm).collect()
    }

    pub fn uniform_param(&self) -> Vec<f64> {
        self.uniform.iter().map(|g| g.param_norm).collect()
    }

    pub fn weighted_param(&self) -> Vec<f64> {
        self.weighted.iter().map(|g| g.param_norm).collect()
    }
}

impl ScaleProfile {
    pub fn new(schedule: &NoiseSchedule) -> Result<Self> {
        let k = schedule.sigma_times.clone();
        let dk = schedule.deltas.clone();
        let raw = k
            .iter()
            .zip(&dk)
            .map(|(k, d)| scale_term(*k, *d, false))
            .collect::<Result<Vec<_>>>()?;
        let a = schedule.config.a;
        Ok(ScaleProfile {
            shift: schedule.config.shift,
            k,
            reweighted: dk.clone(),
            dk,
            raw,
            prefactor: if a > 0.0 { 1.0 / a + a / 2.0 } else { f64::INFINITY },
            empirical: None,
        })
    }

    /// Columns `step_index,k,dk,raw_scale,reweighted_scale`, then four
    /// empirical norm columns when measured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_index,k,dk,raw_scale,reweighted_scale");
        if self.empirical.is_some() {
            out.push_str(",uniform_output_norm,uniform_param_norm,weighted_output_norm,weighted_param_norm");
        }
        out.push('\n');
        for i in 0..self.k.len() {
            let _ = write!(
                out,
                "{i},{},{},{},{}",
                fmt_f64(self.k[i]),
                fmt_f64(self.dk[i]),
                fmt_f64(self.raw[i]),
                fmt_f64(self.reweighted[i])
            );
            if let Some(e) = &self.empirical {
                let (u, w) = (e.uniform[i], e.weighted[i]);
                for v in [u.output_norm, u.param_norm, w.output_norm, w.param_norm] {
                    let _ = write!(out, ",{}", fmt_f64(v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Monte Carlo estimate of `E[eps * A]` against the finite-difference
/// reward gradient at the zero-noise point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub step: usize,
    pub g: Vec<f64>,
    pub mc_estimate: Vec<f64>,
    pub samples: usize,
    pub cosine: f64,
    pub norm: f64,
}

pub const DIRECTION_FD_STEP: f64 = 1e-4;
pub const DIRECTION_NOISE_FACTOR: f64 = 0.01;

/// Reward of the deterministic completion from `x` entering transition `from`.
fn completed_rewards(
    net: &Network,
    params: &ParamSet,
    xs: &Mat,
    schedule: &NoiseSchedule,
    from: usize,
    reward: &Reward,
) -> Result<Vec<f64>> {
    let end = ode_batch(net, params, xs, schedule, from)?;
    Ok((0..end.rows).map(|r| reward.eval(end.row(r))).collect())
}

/// Perturbs the transition mean at step `k` by `noise_factor * sigma sqrt(dt) eps`,
/// completes each sample deterministically, normalises the rewards as one
/// group and averages `eps * A`.
#[allow(clippy::too_many_arguments)]
pub fn direction_check(
    net: &Network,
    params: &ParamSet,
    reward: &Reward,
    x_k: &[f64],
    k: usize,
    schedule: &NoiseSchedule,
    samples: usize,
    noise_factor: f64,
    seeds: &SeedTree,
) -> Result<DirectionCheck> {
    if samples < 1000 {
        return Err(Error::contract("direction check needs at least 1000 samples"));
    }
    if k >= schedule.num_transitions() {
        return Err(Error::contract(format!("step {k} outside grid")));
    }
    let d = x_k.len();
    let (t, dt, s) = schedule.transition(k);
    let mu = transition_mean(net, params, x_k, t, dt, s)?;

    let mut probes = Mat::zeros(2 * d, d);
    for j in 0..d {
        probes.row_mut(2 * j).copy_from_slice(&mu);
        probes.row_mut(2 * j + 1).copy_from_slice(&mu);
        probes.row_mut(2 * j)[j] += DIRECTION_FD_STEP;
        probes.row_mut(2 * j + 1)[j] -= DIRECTION_FD_STEP;
    }
    let pr = completed_rewards(net, params, &probes, schedule, k + 1, reward)?;
    let g: Vec<f64> = (0..d)
        .map(|j| (pr[2 * j] - pr[2 * j + 1]) / (2.0 * DIRECTION_FD_STEP))
        .collect();
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gnorm < 1e-10 {
        return Err(Error::Degenerate(format!("reward gradient norm {gnorm:e} at step {k}")));
    }

    let eps = normal_mat(&mut seeds.stream(&format!("direction-step-{k}")), samples, d);
    let scale = noise_factor * s * dt.sqrt();
    let mut xs = Mat::zeros(samples, d);
    for r in 0..samples {
        for j in 0..d {
            xs.row_mut(r)[j] = mu[j] + scale * eps.get(r, j);
        }
    }
    let rewards = completed_rewards(net, params, &xs, schedule, k + 1, reward)?;
    let sd = pop_std(&rewards);
    if sd < DEFAULT_ADV_GUARD {
        return Err(Error::Degenerate(format!(
            "reward spread {sd:e} trips the normalisation guard"
        )));
    }
    let m = mean(&rewards);
    let mut est = vec![0.0; d];
    for (r, rw) in rewards.iter().enumerate() {
        let a = (rw - m) / sd;
        for j in 0..d {
            est[j] += eps.get(r, j) * a;
        }
    }
    est.iter_mut().for_each(|v| *v /= samples as f64);
    let norm = est.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = est.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (norm * gnorm);
    Ok(DirectionCheck {
        step: k,
        g,
        mc_estimate: est,
        samples,
        cosine,
        norm,
    })
}

/// Per-step policy-gradient norms at unit ratio, averaged over groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientScale {
    /// Gradient reaching the velocity output at step `k`, summed over the
    /// group. Every rollout of a branch group shares `x_k`, so the
    /// parameter gradient is this vector pushed through `d v / d theta`.
    pub output_norm: f64,
    /// Full parameter-gradient norm, which also carries the size of the
    /// network Jacobian at `(x_k, k)`.
    pub param_norm: f64,
}

/// Gradient norms of the policy loss from branch groups at step `k`,
/// averaged over `num_groups` groups of size `g`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_gradient_scale(
    net: &Network,
    params: &ParamSet,
    k: usize,
    reward: &Reward,
    g: usize,
    num_groups: usize,
    schedule: &NoiseSchedule,
    seeds: &SeedTree,
    weight_mode: WeightMode,
) -> Result<GradientScale> {
    if g < 8 {
        return Err(Error::contract("gradient scale needs groups of at least 8"));
    }
    if num_groups == 0 {
        return Err(Error::contract("need at least one group"));
    }
    let d = net.state_dim;
    let w = match weight_mode {
        WeightMode::Uniform => vec![1.0; schedule.num_transitions()],
        WeightMode::NoiseAware => crate::grpo::noise_weights(schedule)?,
    };
    let norms = (0..num_groups)
        .into_par_iter()
        .map(|c| {
            let x_t = group_initial_state(seeds, c, d);
            let eps: Vec<Vec<f64>> = (0..g).map(|i| branch_noise(seeds, c, i, k, d)).collect();
            let mut groups = vec![branch_group_with_noise(
                net, params, c, &x_t, k, &eps, schedule, reward,
            )?];
            normalize_groups(&mut groups, AdvMode::GroupwiseStd, DEFAULT_ADV_GUARD)?;
            let batch = PolicyBatch::from_groups(&groups, schedule, &w)?;
            let gv = velocity_gradient(net, params, &batch, 0.2)?;
            let mut summed = vec![0.0; d];
            for r in 0..gv.rows {
                for (s, v) in summed.iter_mut().zip(gv.row(r)) {
                    *s += v;
                }
            }
            let output_norm = summed.iter().map(|v| v * v).sum::<f64>().sqrt();
            let param_norm = policy_objective(net, params, None, &batch, 0.2, 0.0)?.grads.norm();
            Ok((output_norm, param_norm))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (out, par): (Vec<f64>, Vec<f64>) = norms.into_iter().unzip();
    Ok(GradientScale {
        output_norm: mean(&out),
        param_norm: mean(&par),
    })
}

/// Per-step empirical gradient norms over the whole grid.
#[allow(clippy::too_many_arguments)]
pub fn empirical_scale_profile(
    net: &Network,
    params: &ParamSet,
    reward: &Reward,
    g: usize,
    num_groups: usize,
    schedule: &NoiseSchedule,
    seeds: &SeedTree,
    weight_mode: WeightMode,
) -> Result<Vec<GradientScale>> {
    (0..schedule.num_transitions())
        .map(|k| empirical_gradient_scale(net, params, k, reward, g, num_groups, schedule, seeds, weight_mode))
        .collect()
}

/// Uniform and noise-aware profiles averaged over `num_seeds` independent
/// seed subtrees `scale-seed-{s}`.
#[allow(clippy::too_many_arguments)]
pub fn seed_averaged_scales(
    net: &Network,
    params: &ParamSet,
    reward: &Reward,
    g: usize,
    num_groups: usize,
    schedule: &NoiseSchedule,
    seeds: &SeedTree,
    num_seeds: usize,
) -> Result<EmpiricalScales> {
    if num_seeds == 0 {
        return Err(Error::contract("need at least one seed"));
    }
    let n = schedule.num_transitions();
    let zero = GradientScale {
        output_norm: 0.0,
        param_norm: 0.0,
    };
    let mut uniform = vec![zero; n];
    let mut weighted = vec![zero; n];
    let inv = 1.0 / num_seeds as f64;
    for s in 0..num_seeds {
        let sub = seeds.child(&format!("scale-seed-{s}"));
        for (acc, mode) in [
            (&mut uniform, WeightMode::Uniform),
            (&mut weighted, WeightMode::NoiseAware),
        ] {
            let prof = empirical_scale_profile(net, params, reward, g, num_groups, schedule, &sub, mode)?;
            for (a, p) in acc.iter_mut().zip(prof) {
                a.output_norm += p.output_norm * inv;
                a.param_norm += p.param_norm * inv;
            }
        }
    }
    Ok(EmpiricalScales {
        seeds: num_seeds,
        uniform,
        weighted,
    })
}

/// Coefficient of variation, population std over mean.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    pop_std(xs) / mean(xs)
}

/// Reward spread next to injected noise per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StdNoiseReport {
    pub correlation: f64,
    pub times: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub reward_std: Vec<f64>,
}

impl StdNoiseReport {
    /// Columns `step_index,t,noise_level,reward_std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_index,t,noise_level,reward_std\n");
        for i in 0..self.times.len() {
            let _ = writeln!(
                out,
                "{i},{},{},{}",
                fmt_f64(self.times[i]),
                fmt_f64(self.noise_levels[i]),
                fmt_f64(self.reward_std[i])
            );
        }
        out
    }
}

pub fn std_vs_noise_report(reward_std: &[f64], schedule: &NoiseSchedule) -> Result<StdNoiseReport> {
    let noise_levels = schedule.noise_levels();
    if reward_std.len() != noise_levels.len() {
        return Err(Error::contract("profile length does not match schedule"));
    }
    let correlation = pearson(reward_std, &noise_levels)?;
    Ok(StdNoiseReport {
        correlation,
        times: schedule.times[..noise_levels.len()].to_vec(),
        noise_levels,
        reward_std: reward_std.to_vec(),
    })
}

/// Mean std of the first third of steps over the mean of the last third.
pub fn early_late_ratio(profile: &RewardProfile) -> f64 {
    let n = profile.reward_std.len();
    let third = (n / 3).max(1);
    mean(&profile.reward_std[..third]) / mean(&profile.reward_std[n - third..])
}

/// One line of a pass/fail summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub metric: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
    /// Reported for context only; never fails.
    pub diagnostic: bool,
}

impl Check {
    pub fn new(metric: impl Into<String>, value: f64, threshold: impl Into<String>, pass: bool) -> Self {
        Check {
            metric: metric.into(),
            value,
            threshold: threshold.into(),
            pass,
            diagnostic: false,
        }
    }

    pub fn diagnostic(metric: impl Into<String>, value: f64) -> Self {
        Check {
            metric: metric.into(),
            value,
            threshold: "-".into(),
            pass: true,
            diagnostic: true,
        }
    }

    pub fn status(&self) -> &'static str {
        match (self.diagnostic, self.pass) {
            (true, _) => "INFO",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        }
    }
}

pub fn summary_text(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let _ = writeln!(
            out,
            "{:<32} {:>14.6} {:<16} {}",
            c.metric,
            c.value,
            c.threshold,
            c.status()
        );
    }
    out
}
