//! Sample statistics used by the samplers' checks and the analysis reports.

use rayon::prelude::*;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Mean shifted by the first element, exact when all values are equal.
pub fn mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else { return f64::NAN };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (no Bessel correction).
pub fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn column_means(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m.rows as f64);
    out
}

/// Population covariance, row-major `cols x cols`.
pub fn covariance(m: &Mat) -> Vec<f64> {
    let mu = column_means(m);
    let d = m.cols;
    let mut c = vec![0.0; d * d];
    for r in 0..m.rows {
        let row = m.row(r);
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += (row[i] - mu[i]) * (row[j] - mu[j]);
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= m.rows as f64);
    c
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract("pearson needs two equal series of length >= 2"));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation undefined for a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_cross(x: &Mat, y: &Mat) -> f64 {
    let total: f64 = (0..x.rows)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            (0..y.rows).map(|j| dist(xi, y.row(j))).sum::<f64>()
        })
        .sum();
    total / (x.rows * y.rows) as f64
}

fn mean_within(x: &Mat) -> f64 {
    let n = x.rows;
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            (i + 1..n).map(|j| dist(xi, x.row(j))).sum::<f64>()
        })
        .sum();
    2.0 * total / (n * (n - 1)) as f64
}

/// Two-sample energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` with unbiased
/// (U-statistic) within-sample terms.
pub fn energy_distance(x: &Mat, y: &Mat) -> Result<f64> {
    if x.cols != y.cols || x.rows < 2 || y.rows < 2 {
        return Err(Error::contract(
            "energy distance needs two samples of >= 2 rows, same dim",
        ));
    }
    Ok(2.0 * mean_cross(x, y) - mean_within(x) - mean_within(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_of_123() {
        assert!((pop_std(&[1.0, 2.0, 3.0]) - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pearson_of_affine_series_is_one() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn energy_distance_separates_shifted_samples() {
        let x = Mat::from_rows(&[[0.0], [1.0], [2.0], [3.0]]);
        let y = Mat::from_rows(&[[10.0], [11.0], [12.0], [13.0]]);
        // 2 * 10 - 5/3 - 5/3
        let d = energy_distance(&x, &y).unwrap();
        assert!((d - (20.0 - 10.0 / 3.0)).abs() < 1e-12);
        assert!(energy_distance(&x, &x).unwrap().abs() < 1.0);
    }
}
