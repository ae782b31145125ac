use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{ParamEntry, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::{affine, silu, Mat};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Silu => silu(v),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(format!("unknown activation `{other}` (expected tanh or silu)")),
        }
    }
}

/// Feed-forward velocity network `v(x, t)`.
///
/// Input is `x` concatenated with a sinusoidal time embedding
/// `[sin(w_j t), cos(w_j t)]` for `w_j = 2^j * pi / 2`. Hidden layers carry
/// biases; the output layer does not, so all-zero parameters give the zero field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_freqs: usize,
}

impl Network {
    pub fn new(state_dim: usize, hidden: Vec<usize>, activation: Activation, time_freqs: usize) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::contract("state dimension must be positive"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::contract("network needs at least one non-empty hidden layer"));
        }
        Ok(Network {
            state_dim,
            hidden,
            activation,
            time_freqs,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + 2 * self.time_freqs
    }

    /// `[input, hidden.., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input_dim());
        s.extend_from_slice(&self.hidden);
        s.push(self.state_dim);
        s
    }

    fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Entry names and shapes in declaration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let sizes = self.layer_sizes();
        let mut out = Vec::new();
        for l in 0..self.num_layers() {
            out.push((format!("layer{l}.weight"), vec![sizes[l + 1], sizes[l]]));
            if l + 1 < self.num_layers() {
                out.push((format!("layer{l}.bias"), vec![sizes[l + 1]]));
            }
        }
        out
    }

    pub fn zero_params(&self) -> ParamSet {
        let entries = self
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                ParamEntry {
                    name,
                    shape,
                    values: vec![0.0; n],
                }
            })
            .collect();
        ParamSet::new(entries).expect("layout is valid")
    }

    /// Gaussian fan-in initialisation; biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let entries = self
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values = if shape.len() == 2 {
                    let std = (1.0 / shape[1] as f64).sqrt();
                    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                } else {
                    vec![0.0; n]
                };
                ParamEntry { name, shape, values }
            })
            .collect();
        ParamSet::new(entries).expect("layout is valid")
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if !params.same_layout(self.param_layout().into_iter()) {
            return Err(Error::contract("parameter layout does not match network"));
        }
        Ok(())
    }

    pub fn time_embedding(&self, t: f64, out: &mut Vec<f64>) {
        for j in 0..self.time_freqs {
            let w = (1u64 << j) as f64 * PI / 2.0;
            out.push((w * t).sin());
        }
        for j in 0..self.time_freqs {
            let w = (1u64 << j) as f64 * PI / 2.0;
            out.push((w * t).cos());
        }
    }

    fn input_matrix(&self, xs: &Mat, ts: &[f64]) -> Result<Mat> {
        if xs.cols != self.state_dim {
            return Err(Error::contract(format!(
                "state dimension {} does not match network ({})",
                xs.cols, self.state_dim
            )));
        }
        if ts.len() != xs.rows {
            return Err(Error::contract(format!("{} times for {} states", ts.len(), xs.rows)));
        }
        let mut data = Vec::with_capacity(xs.rows * self.input_dim());
        for (i, &t) in ts.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::contract(format!("time {t} outside [0, 1]")));
            }
            data.extend_from_slice(xs.row(i));
            self.time_embedding(t, &mut data);
        }
        Ok(Mat::from_vec(xs.rows, self.input_dim(), data))
    }

    /// Row-batched velocity evaluation. Each row is computed independently and
    /// in the same order as [`Network::forward`], so results agree bitwise.
    pub fn forward_batch(&self, params: &ParamSet, xs: &Mat, ts: &[f64]) -> Result<Mat> {
        let entries = params.entries();
        if entries.len() != 2 * self.num_layers() - 1 {
            return Err(Error::contract("parameter layout does not match network"));
        }
        let mut h = self.input_matrix(xs, ts)?;
        let mut idx = 0;
        for l in 0..self.num_layers() {
            let w = entries[idx].to_mat();
            idx += 1;
            if w.cols != h.cols {
                return Err(Error::contract(format!("layer {l} expects width {}", w.cols)));
            }
            let last = l + 1 == self.num_layers();
            let b = if last {
                None
            } else {
                idx += 1;
                Some(entries[idx - 1].to_mat())
            };
            h = affine(&h, &w, b.as_ref());
            if !h.is_finite() {
                return Err(Error::numeric(format!("network output of layer {l}")));
            }
            if !last {
                for v in &mut h.data {
                    *v = self.activation.apply(*v);
                }
            }
        }
        Ok(h)
    }

    /// `v(x, t)` for a single state.
    pub fn forward(&self, params: &ParamSet, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = Mat::row_vector(x);
        Ok(self.forward_batch(params, &xs, &[t])?.data)
    }

    /// Records the forward pass on `tape`. `param_vars` comes from [`Tape::params`].
    pub fn forward_tape(&self, tape: &mut Tape, param_vars: &[Var], xs: &Mat, ts: &[f64]) -> Result<Var> {
        if param_vars.len() != 2 * self.num_layers() - 1 {
            return Err(Error::contract("parameter layout does not match network"));
        }
        let input = self.input_matrix(xs, ts)?;
        let mut h = tape.constant(input);
        let mut idx = 0;
        for l in 0..self.num_layers() {
            let w = param_vars[idx];
            idx += 1;
            let last = l + 1 == self.num_layers();
            let b = if last {
                None
            } else {
                idx += 1;
                Some(param_vars[idx - 1])
            };
            h = tape.affine(h, w, b);
            if !last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Silu => tape.silu(h),
                };
            }
        }
        Ok(h)
    }
}
