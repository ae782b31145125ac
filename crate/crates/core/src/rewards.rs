//! Analytic terminal rewards on `x_0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmodel::{cholesky, DataSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// Gaussian log-density under `(mean, cov)`, shifted so the peak is 0.
    ModeDensity {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Linear {
        u: Vec<f64>,
    },
    /// Smooth box indicator: product of sigmoids of width `width`.
    Region {
        lo: Vec<f64>,
        hi: Vec<f64>,
        width: f64,
    },
    /// Same value everywhere; used for degenerate-case checks.
    Constant {
        value: f64,
    },
}

/// Validated, ready-to-evaluate reward.
#[derive(Clone, Debug)]
pub struct Reward {
    spec: RewardSpec,
    precision: Option<DMatrix<f64>>,
}

impl Reward {
    pub fn new(spec: RewardSpec) -> Result<Self> {
        let precision = match &spec {
            RewardSpec::ModeDensity { mean, cov } => {
                if cov.len() != mean.len() || cov.iter().any(|r| r.len() != mean.len()) {
                    return Err(Error::config("reward.cov", "covariance shape does not match mean"));
                }
                let l =
                    cholesky(cov).ok_or_else(|| Error::config("reward.cov", "covariance is not positive definite"))?;
                let linv = l
                    .try_inverse()
                    .ok_or_else(|| Error::config("reward.cov", "covariance is singular"))?;
                Some(linv.transpose() * linv)
            }
            RewardSpec::Linear { u } => {
                if u.iter().all(|v| *v == 0.0) || u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("reward.u", "direction must be finite and non-zero"));
                }
                None
            }
            RewardSpec::Region { lo, hi, width } => {
                if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(Error::config("reward.lo", "region box must be non-degenerate"));
                }
                if !(*width > 0.0) {
                    return Err(Error::config("reward.width", "smoothing width must be positive"));
                }
                None
            }
            RewardSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::config("reward.value", "constant must be finite"));
                }
                None
            }
        };
        Ok(Reward { spec, precision })
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.spec {
            RewardSpec::ModeDensity { mean, .. } => {
                let p = self.precision.as_ref().expect("set in new");
                mode_density_with_precision(x, mean, p)
            }
            RewardSpec::Linear { u } => linear_reward(x, u),
            RewardSpec::Region { lo, hi, width } => region_reward(x, lo, hi, *width),
            RewardSpec::Constant { value } => *value,
        }
    }

    /// Whether `x` counts as a hit for occupancy metrics: nearest data mode is
    /// the target's mode (density), inside the box (region), `u . x > 0` (linear).
    pub fn occupies(&self, x: &[f64], data: &DataSpec) -> bool {
        match &self.spec {
            RewardSpec::ModeDensity { mean, .. } => data.assign_mode(x) == data.assign_mode(mean),
            RewardSpec::Linear { u } => linear_reward(x, u) > 0.0,
            RewardSpec::Region { lo, hi, .. } => {
                x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
            }
            RewardSpec::Constant { .. } => true,
        }
    }
}

fn mode_density_with_precision(x: &[f64], mean: &[f64], precision: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
    -0.5 * (d.transpose() * precision * &d)[(0, 0)]
}

/// `log N(x; mean, cov) - log N(mean; mean, cov)`.
pub fn mode_density_reward(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> Result<f64> {
    let r = Reward::new(RewardSpec::ModeDensity {
        mean: mean.to_vec(),
        cov: cov.to_vec(),
    })?;
    Ok(r.eval(x))
}

pub fn linear_reward(x: &[f64], u: &[f64]) -> f64 {
    x.iter().zip(u).map(|(a, b)| a * b).sum()
}

pub fn region_reward(x: &[f64], lo: &[f64], hi: &[f64], width: f64) -> f64 {
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| sig((v - l) / width) * sig((h - v) / width))
        .product()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.0, 1.0]]
    }

    #[test]
    fn density_peak_and_unit_mahalanobis() {
        let mu = [3.0, 0.0];
        assert_eq!(mode_density_reward(&mu, &mu, &eye()).unwrap(), 0.0);
        let cov = vec![vec![4.0, 0.0], vec![0.0, 0.25]];
        // one Mahalanobis unit along the second axis is 0.5 away
        let r = mode_density_reward(&[3.0, 0.5], &mu, &cov).unwrap();
        assert!((r + 0.5).abs() < 1e-12);
        let r = mode_density_reward(&[5.0, 0.0], &mu, &cov).unwrap();
        assert!((r + 0.5).abs() < 1e-12);
    }

    #[test]
    fn density_rejects_non_pd() {
        let bad = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            Reward::new(RewardSpec::ModeDensity {
                mean: vec![0.0, 0.0],
                cov: bad
            }),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn linear_value_and_finite_difference_gradient() {
        let u = [1.0, 0.0];
        assert_eq!(linear_reward(&[3.0, -2.0], &u), 3.0);
        let u = [0.3, -1.7];
        let x = [0.4, 2.2];
        let h = 1e-4;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let g = (linear_reward(&xp, &u) - linear_reward(&xm, &u)) / (2.0 * h);
            assert!((g - u[j]).abs() < 1e-10);
        }
        assert!(Reward::new(RewardSpec::Linear { u: vec![0.0, 0.0] }).is_err());
    }

    #[test]
    fn region_saturates() {
        let (lo, hi) = ([-1.0, -1.0], [1.0, 1.0]);
        assert!(region_reward(&[0.0, 0.0], &lo, &hi, 0.01) > 1.0 - 1e-12);
        assert!(region_reward(&[10.0, 0.0], &lo, &hi, 0.1) < 1e-12);
        let v = region_reward(&[0.9, -0.3], &lo, &hi, 0.5);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn occupancy_uses_nearest_mode() {
        let data = DataSpec::two_gaussians(3.0, 0.3);
        let r = Reward::new(RewardSpec::ModeDensity {
            mean: vec![3.0, 0.0],
            cov: eye(),
        })
        .unwrap();
        assert!(r.occupies(&[2.0, 1.0], &data));
        assert!(!r.occupies(&[-0.1, 0.0], &data));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn rewards_are_finite_and_bounded_above(x0 in -50.0f64..50.0, x1 in -50.0f64..50.0) {
                let x = [x0, x1];
                let d = mode_density_reward(&x, &[1.0, -1.0], &eye()).unwrap();
                prop_assert!(d.is_finite() && d <= 0.0);
                let r = region_reward(&x, &[-1.0, -1.0], &[1.0, 1.0], 0.2);
                prop_assert!(r.is_finite() && (0.0..=1.0).contains(&r));
                prop_assert!(linear_reward(&x, &[0.5, 0.5]).is_finite());
            }
        }
    }
}
