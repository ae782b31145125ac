//! Marginal-preserving SDE sampling, Gaussian transition kernels, per-step
//! log-probabilities and the closed-form KL between two kernels.
//!
//! Time runs from `t = 1` (noise) down to `t = 0` (data) and every `dt` is a
//! positive step magnitude. One stochastic transition from `(x, t)` is
//!
//! ```text
//! mean = x - [v + sigma^2 / (2t) * (x + (1 - t) v)] * dt
//! x'   = mean + sigma * sqrt(dt) * eps
//! ```
//!
//! with `sigma = a * sqrt(t / (1 - t))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Network, ParamSet};
use crate::error::{Error, Result};
use crate::flowmodel::{StepKind, StepMeta, Trajectory};

pub const DEFAULT_NOISE_SCALE: f64 = 0.7;
pub const DEFAULT_DELTA_CLAMP: f64 = 1e-3;

/// `a * sqrt(t / (1 - t))` evaluated at `t` clamped to `[delta, 1 - delta]`.
pub fn sigma(t: f64, a: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::domain(format!("clamp width {delta} outside (0, 0.5)")));
    }
    if !a.is_finite() || a < 0.0 {
        return Err(Error::domain(format!("noise scale {a} must be finite and >= 0")));
    }
    let tc = t.clamp(delta, 1.0 - delta);
    if !(tc > 0.0 && tc < 1.0) {
        return Err(Error::domain(format!("time {t} outside (0, 1) after clamping")));
    }
    Ok(a * (tc / (1.0 - tc)).sqrt())
}

/// `t -> shift * t / (1 + (shift - 1) * t)`.
pub fn shift_time(t: f64, shift: f64) -> f64 {
    shift * t / (1.0 + (shift - 1.0) * t)
}

/// Uniform grid `1, 1 - 1/T, ..., 0` warped by the flow shift.
pub fn shifted_grid(num_steps: usize, shift: f64) -> Result<Vec<f64>> {
    if num_steps == 0 {
        return Err(Error::contract("grid needs at least one step"));
    }
    if !(shift >= 1.0 && shift.is_finite()) {
        return Err(Error::contract(format!("flow shift {shift} must be >= 1")));
    }
    Ok((0..=num_steps)
        .map(|i| {
            let t = 1.0 - i as f64 / num_steps as f64;
            if shift == 1.0 {
                t
            } else {
                shift_time(t, shift)
            }
        })
        .collect())
}

/// Serialized schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub a: f64,
    pub shift: f64,
    pub delta_clamp: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            num_steps: 8,
            a: DEFAULT_NOISE_SCALE,
            shift: 1.0,
            delta_clamp: DEFAULT_DELTA_CLAMP,
        }
    }
}

/// Discretised time grid with per-transition noise levels.
///
/// Transition `i` moves from `times[i]` to `times[i + 1]`. Its noise level is
/// `sigma` at the transition's start time, except that a start time inside
/// the singular end `t > 1 - delta` borrows the next grid time instead.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub times: Vec<f64>,
    pub deltas: Vec<f64>,
    pub sigma_times: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Noise-aware policy weights; `None` when every sigma is zero.
    pub weights: Option<Vec<f64>>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let times = shifted_grid(config.num_steps, config.shift)?;
        Self::from_times(config, times)
    }

    /// Schedule over an arbitrary strictly decreasing grid ending at 0.
    pub fn from_times(config: ScheduleConfig, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::contract("time grid needs at least two points"));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::contract("time grid must be strictly decreasing"));
        }
        if times[0] > 1.0 || *times.last().unwrap() < 0.0 {
            return Err(Error::contract("time grid must lie in [0, 1]"));
        }
        let delta = config.delta_clamp;
        let deltas: Vec<f64> = times.windows(2).map(|w| w[0] - w[1]).collect();
        let sigma_times: Vec<f64> = (0..deltas.len())
            .map(|i| if times[i] > 1.0 - delta { times[i + 1] } else { times[i] })
            .collect();
        let sigmas = sigma_times
            .iter()
            .map(|&t| sigma(t, config.a, delta))
            .collect::<Result<Vec<_>>>()?;
        let mut schedule = NoiseSchedule {
            config: ScheduleConfig {
                num_steps: deltas.len(),
                ..config
            },
            times,
            deltas,
            sigma_times,
            sigmas,
            weights: None,
        };
        schedule.weights = crate::grpo::noise_weights(&schedule).ok();
        Ok(schedule)
    }

    pub fn num_transitions(&self) -> usize {
        self.deltas.len()
    }

    /// `(t, dt, sigma)` of transition `i`.
    pub fn transition(&self, i: usize) -> (f64, f64, f64) {
        (self.times[i], self.deltas[i], self.sigmas[i])
    }

    /// Injected noise magnitude `sigma * sqrt(dt)` per transition.
    pub fn noise_levels(&self) -> Vec<f64> {
        self.sigmas
            .iter()
            .zip(&self.deltas)
            .map(|(s, d)| s * d.sqrt())
            .collect()
    }

    /// Same grid with a different noise scale.
    pub fn with_noise_scale(&self, a: f64) -> Result<Self> {
        Self::from_times(ScheduleConfig { a, ..self.config }, self.times.clone())
    }
}

/// Drift-corrected kernel mean for a known velocity `v` at `(x, t)`.
pub fn mean_from_velocity(x: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64, out: &mut [f64]) {
    let c = sigma * sigma / (2.0 * t);
    for j in 0..x.len() {
        let drift = v[j] + c * (x[j] + (1.0 - t) * v[j]);
        out[j] = x[j] - drift * dt;
    }
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(format!("transition start time {t} outside (0, 1]")));
    }
    if !(dt > 0.0 && t - dt >= -1e-12) {
        return Err(Error::domain(format!("step {dt} invalid at t = {t}")));
    }
    Ok(())
}

/// `mu_theta(x, t)` of the Gaussian transition kernel.
pub fn transition_mean(net: &Network, params: &ParamSet, x: &[f64], t: f64, dt: f64, sigma: f64) -> Result<Vec<f64>> {
    check_step(t, dt)?;
    let v = net.forward(params, x, t)?;
    let mut out = vec![0.0; x.len()];
    mean_from_velocity(x, &v, t, dt, sigma, &mut out);
    if out.iter().any(|m| !m.is_finite()) {
        return Err(Error::numeric(format!("transition mean at t = {t}")));
    }
    Ok(out)
}

/// One realised stochastic transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x_from: Vec<f64>,
    pub x_to: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub sigma: f64,
    pub eps: Vec<f64>,
    pub mean: Vec<f64>,
    /// `sigma * sqrt(dt)`.
    pub std_scalar: f64,
}

impl Transition {
    pub fn log_prob(&self) -> Result<f64> {
        log_prob(&self.mean, self.std_scalar, &self.x_to)
    }
}

/// `x_to[j] = mean[j] + std * eps[j]`, the one place this is computed.
pub(crate) fn perturb(mean: &[f64], std_scalar: f64, eps: &[f64]) -> Vec<f64> {
    mean.iter().zip(eps).map(|(m, e)| m + std_scalar * e).collect()
}

pub fn sde_step(
    net: &Network,
    params: &ParamSet,
    x: &[f64],
    t: f64,
    dt: f64,
    sigma: f64,
    eps: &[f64],
) -> Result<Transition> {
    if eps.len() != x.len() {
        return Err(Error::contract(format!(
            "noise dimension {} does not match state dimension {}",
            eps.len(),
            x.len()
        )));
    }
    let mean = transition_mean(net, params, x, t, dt, sigma)?;
    let std_scalar = sigma * dt.sqrt();
    let x_to = perturb(&mean, std_scalar, eps);
    if x_to.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("sde step at t = {t}")));
    }
    Ok(Transition {
        x_from: x.to_vec(),
        x_to,
        t,
        dt,
        sigma,
        eps: eps.to_vec(),
        mean,
        std_scalar,
    })
}

/// Isotropic Gaussian log-density of `x_to` under `N(mean, std^2 I)`.
pub fn log_prob(mean: &[f64], std_scalar: f64, x_to: &[f64]) -> Result<f64> {
    if !(std_scalar > 0.0) {
        return Err(Error::domain(format!("kernel std {std_scalar} must be positive")));
    }
    if mean.len() != x_to.len() {
        return Err(Error::contract("log_prob dimension mismatch"));
    }
    let var = std_scalar * std_scalar;
    let d = mean.len() as f64;
    let sq: f64 = mean.iter().zip(x_to).map(|(m, x)| (x - m) * (x - m)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

/// Closed-form KL between the kernels of two velocity fields at the same `(x, t)`,
/// given the transition's noise level directly.
pub fn kl_with_sigma(v_theta: &[f64], v_ref: &[f64], t: f64, dt: f64, sigma: f64) -> Result<f64> {
    if v_theta.len() != v_ref.len() {
        return Err(Error::contract("kl: velocity dimension mismatch"));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain("kl undefined for zero noise"));
    }
    check_step(t, dt)?;
    let coef = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
    let sq: f64 = v_theta.iter().zip(v_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * dt * coef * coef * sq)
}

/// Closed-form KL with `sigma` computed from the noise scale `a`.
pub fn kl_closed_form(v_theta: &[f64], v_ref: &[f64], t: f64, dt: f64, a: f64, delta: f64) -> Result<f64> {
    kl_with_sigma(v_theta, v_ref, t, dt, sigma(t, a, delta)?)
}

/// Runs the whole grid stochastically with the supplied per-step noise.
pub fn sde_sample(
    net: &Network,
    params: &ParamSet,
    x_t: &[f64],
    schedule: &NoiseSchedule,
    eps: &[Vec<f64>],
) -> Result<Trajectory> {
    if eps.len() != schedule.num_transitions() {
        return Err(Error::contract("need one noise vector per transition"));
    }
    let mut states = vec![x_t.to_vec()];
    let mut steps = Vec::with_capacity(eps.len());
    for (i, e) in eps.iter().enumerate() {
        let (t, dt, s) = schedule.transition(i);
        let tr = sde_step(net, params, states.last().unwrap(), t, dt, s, e)?;
        let logp = if tr.std_scalar > 0.0 {
            Some(tr.log_prob()?)
        } else {
            None
        };
        steps.push(StepMeta {
            kind: StepKind::Sde,
            eps: Some(tr.eps),
            logp,
        });
        states.push(tr.x_to);
    }
    Ok(Trajectory {
        states,
        times: schedule.times.clone(),
        steps,
    })
}

/// Batched stochastic transition: returns `(means, x_to)` row by row using
/// the same arithmetic as [`sde_step`].
pub fn sde_step_batch(
    net: &Network,
    params: &ParamSet,
    xs: &Mat,
    t: f64,
    dt: f64,
    sigma: f64,
    eps: &Mat,
) -> Result<(Mat, Mat)> {
    check_step(t, dt)?;
    if eps.shape() != xs.shape() {
        return Err(Error::contract("noise batch shape mismatch"));
    }
    let ts = vec![t; xs.rows];
    let v = net.forward_batch(params, xs, &ts)?;
    let mut means = Mat::zeros(xs.rows, xs.cols);
    let std_scalar = sigma * dt.sqrt();
    let mut out = Mat::zeros(xs.rows, xs.cols);
    for r in 0..xs.rows {
        mean_from_velocity(xs.row(r), v.row(r), t, dt, sigma, means.row_mut(r));
        let to = perturb(means.row(r), std_scalar, eps.row(r));
        out.row_mut(r).copy_from_slice(&to);
    }
    if !out.is_finite() {
        return Err(Error::numeric(format!("sde batch step at t = {t}")));
    }
    Ok((means, out))
}
