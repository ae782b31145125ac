//! Rectified-flow velocity model: toy 2D data, conditional flow-matching
//! pretraining and deterministic Euler sampling from `t = 1` to `t = 0`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Mat, Network, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::rng::{normal_mat, SeedTree};
use crate::stochastic::NoiseSchedule;

/// Synthetic target distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    /// Uniform over the dark cells of a `grid x grid` board of side `cell`,
    /// centred on the origin (2D only).
    Checkerboard { grid: usize, cell: f64 },
    /// Equal-weight isotropic Gaussians evenly spaced on a circle.
    Ring { modes: usize, radius: f64, std: f64 },
}

impl DataSpec {
    /// Two isotropic Gaussians at `(+-sep, 0)` with equal weight.
    pub fn two_gaussians(sep: f64, std: f64) -> Self {
        let cov = vec![vec![std * std, 0.0], vec![0.0, std * std]];
        DataSpec::GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![sep, 0.0], vec![-sep, 0.0]],
            covs: vec![cov.clone(), cov],
        }
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        DataSpec::GaussianMixture {
            weights: vec![1.0],
            means: vec![vec![0.0; dim]],
            covs: vec![cov],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSpec::GaussianMixture { means, .. } => means.first().map_or(0, |m| m.len()),
            DataSpec::Checkerboard { .. } | DataSpec::Ring { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::GaussianMixture { weights, means, covs } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
                    return Err(Error::config(
                        "data",
                        "weights, means and covs must have equal, non-zero length",
                    ));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::config(
                        "data.weights",
                        "mixture weights must be >= 0 and sum to 1",
                    ));
                }
                let d = self.dim();
                if d == 0 {
                    return Err(Error::config("data.means", "empty mean vector"));
                }
                for (k, (m, c)) in means.iter().zip(covs).enumerate() {
                    if m.len() != d || c.len() != d || c.iter().any(|r| r.len() != d) {
                        return Err(Error::config(
                            "data.covs",
                            format!("component {k} has inconsistent dimension"),
                        ));
                    }
                    cholesky(c).ok_or_else(|| {
                        Error::config(
                            "data.covs",
                            format!("component {k} covariance is not positive definite"),
                        )
                    })?;
                }
                Ok(())
            }
            DataSpec::Checkerboard { grid, cell } => {
                if *grid < 2 || !(*cell > 0.0) {
                    return Err(Error::config("data.grid", "checkerboard needs grid >= 2 and cell > 0"));
                }
                Ok(())
            }
            DataSpec::Ring { modes, radius, std } => {
                if *modes == 0 || !(*radius > 0.0) || !(*std > 0.0) {
                    return Err(Error::config(
                        "data.modes",
                        "ring needs modes >= 1, radius > 0, std > 0",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Centres of the distribution's modes (cell centres for the checkerboard).
    pub fn mode_centers(&self) -> Vec<Vec<f64>> {
        match self {
            DataSpec::GaussianMixture { means, .. } => means.clone(),
            DataSpec::Ring { modes, radius, .. } => (0..*modes)
                .map(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / *modes as f64;
                    vec![radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            DataSpec::Checkerboard { grid, cell } => {
                let half = *grid as f64 * cell / 2.0;
                let mut out = Vec::new();
                for i in 0..*grid {
                    for j in 0..*grid {
                        if (i + j) % 2 == 0 {
                            out.push(vec![-half + (i as f64 + 0.5) * cell, -half + (j as f64 + 0.5) * cell]);
                        }
                    }
                }
                out
            }
        }
    }

    /// Index of the nearest mode centre.
    pub fn assign_mode(&self, x: &[f64]) -> usize {
        let centers = self.mode_centers();
        let d2 = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..centers.len())
            .min_by(|&a, &b| d2(&centers[a]).total_cmp(&d2(&centers[b])))
            .unwrap_or(0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Mat> {
        self.validate()?;
        let d = self.dim();
        let mut out = Mat::zeros(n, d);
        match self {
            DataSpec::GaussianMixture { weights, means, covs } => {
                let pick = WeightedIndex::new(weights).map_err(|e| Error::config("data.weights", e.to_string()))?;
                let chols: Vec<DMatrix<f64>> = covs.iter().map(|c| cholesky(c).unwrap()).collect();
                for r in 0..n {
                    let k = pick.sample(rng);
                    let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
                    let x = &chols[k] * z;
                    for j in 0..d {
                        out.row_mut(r)[j] = means[k][j] + x[j];
                    }
                }
            }
            DataSpec::Checkerboard { grid, cell } => {
                let half = *grid as f64 * cell / 2.0;
                for r in 0..n {
                    loop {
                        let i = rng.gen_range(0..*grid);
                        let j = rng.gen_range(0..*grid);
                        if (i + j) % 2 != 0 {
                            continue;
                        }
                        let u: f64 = rng.gen();
                        let w: f64 = rng.gen();
                        out.row_mut(r)[0] = -half + (i as f64 + u) * cell;
                        out.row_mut(r)[1] = -half + (j as f64 + w) * cell;
                        break;
                    }
                }
            }
            DataSpec::Ring { modes, std, .. } => {
                let centers = self.mode_centers();
                for r in 0..n {
                    let k = rng.gen_range(0..*modes);
                    for j in 0..2 {
                        let z: f64 = StandardNormal.sample(rng);
                        out.row_mut(r)[j] = centers[k][j] + std * z;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Lower Cholesky factor, `None` unless symmetric positive definite.
pub(crate) fn cholesky(c: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let d = c.len();
    let m = DMatrix::from_fn(d, d, |i, j| c[i][j]);
    if (0..d).any(|i| (0..d).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
        return None;
    }
    m.cholesky().map(|ch| ch.l())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Ode,
    Sde,
}

/// Per-transition metadata. SDE steps carry their noise and log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMeta {
    pub kind: StepKind,
    pub eps: Option<Vec<f64>>,
    pub logp: Option<f64>,
}

impl StepMeta {
    pub fn ode() -> Self {
        StepMeta {
            kind: StepKind::Ode,
            eps: None,
            logp: None,
        }
    }
}

/// Reverse-time trajectory `x_T, ..., x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub steps: Vec<StepMeta>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.times.len() || self.steps.len() + 1 != self.states.len() {
            return Err(Error::contract("trajectory length mismatch"));
        }
        if self.times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::contract("trajectory times must strictly decrease"));
        }
        for (i, s) in self.steps.iter().enumerate() {
            let ok = match s.kind {
                StepKind::Ode => s.eps.is_none() && s.logp.is_none(),
                // zero-noise SDE steps have no density, so logp may be absent
                StepKind::Sde => s.eps.is_some(),
            };
            if !ok {
                return Err(Error::contract(format!("step {i} metadata inconsistent with its kind")));
            }
        }
        Ok(())
    }

    /// One CSV row per state: `step,t,x0,x1,...`.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, |s| s.len());
        let mut out = String::from("step,t");
        for j in 0..d {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for (i, (s, t)) in self.states.iter().zip(&self.times).enumerate() {
            let _ = write!(out, "{i},{}", fmt_f64(*t));
            for v in s {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// 17 significant digits, plain decimal point.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Euler step toward data: `x - v(x, t) * dt`.
pub fn ode_step(net: &Network, params: &ParamSet, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || t - dt < -1e-12 {
        return Err(Error::domain(format!("ode step {dt} invalid at t = {t}")));
    }
    let v = net.forward(params, x, t)?;
    let out: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x - v * dt).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("ode step at t = {t}")));
    }
    Ok(out)
}

/// Deterministic rollout over the whole grid.
pub fn ode_sample(net: &Network, params: &ParamSet, x_t: &[f64], schedule: &NoiseSchedule) -> Result<Trajectory> {
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("initial state"));
    }
    let mut states = vec![x_t.to_vec()];
    for i in 0..schedule.num_transitions() {
        let (t, dt, _) = schedule.transition(i);
        let next = ode_step(net, params, states.last().unwrap(), t, dt)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        times: schedule.times.clone(),
        steps: vec![StepMeta::ode(); schedule.num_transitions()],
    })
}

/// [`ode_step`] applied to every row.
pub fn ode_step_batch(net: &Network, params: &ParamSet, xs: &Mat, t: f64, dt: f64) -> Result<Mat> {
    if !(dt > 0.0) || t - dt < -1e-12 {
        return Err(Error::domain(format!("ode step {dt} invalid at t = {t}")));
    }
    let ts = vec![t; xs.rows];
    let v = net.forward_batch(params, xs, &ts)?;
    let mut out = xs.clone();
    for (x, v) in out.data.iter_mut().zip(&v.data) {
        *x -= v * dt;
    }
    if !out.is_finite() {
        return Err(Error::numeric(format!("ode batch step at t = {t}")));
    }
    Ok(out)
}

/// Batched deterministic integration from transition `from` to the end.
/// Row results equal [`ode_step`] applied row by row.
pub fn ode_batch(net: &Network, params: &ParamSet, xs: &Mat, schedule: &NoiseSchedule, from: usize) -> Result<Mat> {
    let mut cur = xs.clone();
    for i in from..schedule.num_transitions() {
        let (t, dt, _) = schedule.transition(i);
        cur = ode_step_batch(net, params, &cur, t, dt)?;
    }
    Ok(cur)
}

/// Conditional flow-matching pretraining settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch: 256,
            lr: 2e-3,
        }
    }
}

/// Outcome of pretraining: final parameters plus the per-step loss curve.
#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub params: ParamSet,
    pub losses: Vec<f64>,
}

/// Minimises `E |v(x_t, t) - (x1 - x0)|^2` with `x_t = (1 - t) x0 + t x1`,
/// `x0 ~ data`, `x1 ~ N(0, I)`, `t ~ U(0, 1)`.
///
/// The learning rate decays with a cosine schedule to 5% of `cfg.lr`.
pub fn cfm_pretrain(
    net: &Network,
    init: ParamSet,
    data: &DataSpec,
    cfg: &PretrainConfig,
    seeds: &SeedTree,
) -> Result<PretrainResult> {
    net.check_params(&init)?;
    data.validate()?;
    if data.dim() != net.state_dim {
        return Err(Error::contract("data dimension does not match network"));
    }
    if cfg.batch == 0 {
        return Err(Error::contract("pretraining batch must be positive"));
    }
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let d = net.state_dim;
    for step in 0..cfg.steps {
        let mut rng = seeds.stream(&format!("cfm-step-{step}"));
        let x0 = data.sample(&mut rng, cfg.batch)?;
        let x1 = normal_mat(&mut rng, cfg.batch, d);
        let ts: Vec<f64> = (0..cfg.batch).map(|_| rng.gen::<f64>()).collect();
        let mut xt = Mat::zeros(cfg.batch, d);
        let mut target = Mat::zeros(cfg.batch, d);
        for r in 0..cfg.batch {
            let t = ts[r];
            for j in 0..d {
                let (a, b) = (x0.get(r, j), x1.get(r, j));
                xt.row_mut(r)[j] = (1.0 - t) * a + t * b;
                target.row_mut(r)[j] = b - a;
            }
        }
        let mut tape = Tape::new();
        let pv = tape.params(&params);
        let v = net.forward_tape(&mut tape, &pv, &xt, &ts)?;
        let tgt = tape.constant(target);
        let diff = tape.sub(v, tgt);
        let sq = tape.sq_norm(diff);
        let loss = tape.scale(sq, 1.0 / cfg.batch as f64);
        let lv = tape.value(loss).as_scalar();
        if !lv.is_finite() {
            return Err(Error::Training {
                step,
                message: "flow-matching loss is not finite".into(),
            });
        }
        losses.push(lv);
        let grads = tape.backward(loss, &params).map_err(|e| Error::Training {
            step,
            message: e.to_string(),
        })?;
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam_step(&mut params, &grads, &mut state, &AdamConfig::with_lr(lr))?;
    }
    Ok(PretrainResult { params, losses })
}
