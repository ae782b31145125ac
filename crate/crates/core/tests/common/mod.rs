#![allow(dead_code)]

use std::sync::OnceLock;

use tempflow::autodiff::{Network, ParamSet};
use tempflow::harness::{pretrain_model, ExperimentConfig};

pub struct Trained {
    pub cfg: ExperimentConfig,
    pub net: Network,
    pub params: ParamSet,
}

/// Default 2-Gaussian model, pretrained once per test binary.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let (net, res) = pretrain_model(&cfg).expect("pretraining");
        Trained {
            cfg,
            net,
            params: res.params,
        }
    })
}

/// Mean shifted by the first element, exact when all values are equal.
pub fn mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else { return f64::NAN };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

pub fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Column means and the flattened sample covariance (divisor n - 1).
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            m[j] += r[j] / n;
        }
    }
    let mut c = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += (r[i] - m[i]) * (r[j] - m[j]) / (n - 1.0);
            }
        }
    }
    (m, c)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unbiased two-sample energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|`.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let cross = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += dist(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let within = |a: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                s += dist(&a[i], &a[j]);
            }
        }
        2.0 * s / (a.len() * (a.len() - 1)) as f64
    };
    2.0 * cross(x, y) - within(x) - within(y)
}

pub fn rows(m: &tempflow::autodiff::Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}
