//! Kernel functions used to weight reference neighbors.
//!
//! Distance kernels (gaussian, matern) consume a distance `d >= 0`;
//! similarity kernels (linear, polynomial) consume a cosine similarity `s`,
//! clamped at zero so that weights stay non-negative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-d^2 / (2 sigma^2))`. `bandwidth: None` picks sigma per query by
    /// the median heuristic.
    Gaussian {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    /// Matern with smoothness 3/2.
    Matern {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    /// `(max(s, 0) + offset)^degree`.
    Polynomial { degree: u32, offset: f64 },
    /// `max(s, 0)`.
    Linear,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian { bandwidth: None }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { bandwidth } | KernelSpec::Matern { bandwidth } => {
                if let Some(s) = bandwidth {
                    check_bandwidth(s)?;
                }
            }
            KernelSpec::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(Error::InvalidSpec("polynomial degree must be >= 1".into()));
                }
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "polynomial offset must be >= 0, got {offset}"
                    )));
                }
            }
            KernelSpec::Linear => {}
        }
        Ok(())
    }

    pub fn uses_distance(&self) -> bool {
        matches!(self, KernelSpec::Gaussian { .. } | KernelSpec::Matern { .. })
    }

    /// Fills in a missing bandwidth with the median of `distances`.
    pub fn resolve(&self, distances: &[f64]) -> KernelSpec {
        match *self {
            KernelSpec::Gaussian { bandwidth: None } => KernelSpec::Gaussian {
                bandwidth: Some(median_bandwidth(distances)),
            },
            KernelSpec::Matern { bandwidth: None } => KernelSpec::Matern {
                bandwidth: Some(median_bandwidth(distances)),
            },
            other => other,
        }
    }

    /// Evaluates the kernel at distance `d` / similarity `s`.
    pub fn eval(&self, d: f64, s: f64) -> Result<f64> {
        if !(d >= 0.0 && d.is_finite()) || !s.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "kernel inputs must be finite with d >= 0, got d={d}, s={s}"
            )));
        }
        Ok(match *self {
            KernelSpec::Gaussian { bandwidth } => {
                let sigma = resolved(bandwidth)?;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            }
            KernelSpec::Matern { bandwidth } => {
                let r = 3f64.sqrt() * d / resolved(bandwidth)?;
                (1.0 + r) * (-r).exp()
            }
            KernelSpec::Linear => s.max(0.0),
            KernelSpec::Polynomial { degree, offset } => {
                (s.max(0.0) + offset).powi(degree as i32)
            }
        })
    }
}

fn check_bandwidth(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("bandwidth must be > 0, got {sigma}")))
    }
}

fn resolved(bandwidth: Option<f64>) -> Result<f64> {
    let sigma = bandwidth
        .ok_or_else(|| Error::InvalidSpec("kernel bandwidth not resolved".into()))?;
    check_bandwidth(sigma)?;
    Ok(sigma)
}

/// Median of the distances; falls back to the largest distance, then to 1,
/// when the median is zero.
pub fn median_bandwidth(distances: &[f64]) -> f64 {
    let mut d: Vec<f64> = distances.iter().copied().filter(|v| v.is_finite()).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if median > 0.0 {
        median
    } else if d[n - 1] > 0.0 {
        d[n - 1]
    } else {
        1.0
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Gaussian { .. } => f.write_str("gaussian"),
            KernelSpec::Matern { .. } => f.write_str("matern"),
            KernelSpec::Polynomial { .. } => f.write_str("polynomial"),
            KernelSpec::Linear => f.write_str("linear"),
        }
    }
}

/// Parses a bare kernel name with default parameters.
impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelSpec::Gaussian { bandwidth: None }),
            "matern" => Ok(KernelSpec::Matern { bandwidth: None }),
            "polynomial" => Ok(KernelSpec::Polynomial {
                degree: 2,
                offset: 1.0,
            }),
            "linear" => Ok(KernelSpec::Linear),
            other => Err(Error::InvalidSpec(format!("unknown kernel {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const G1: KernelSpec = KernelSpec::Gaussian {
        bandwidth: Some(1.0),
    };

    #[test]
    fn gaussian_values() {
        assert_eq!(G1.eval(0.0, 1.0).unwrap(), 1.0);
        let g = KernelSpec::Gaussian {
            bandwidth: Some(0.3),
        };
        let v = g.eval(0.3, 0.0).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.606_530_659_712_633).abs() < 1e-12);
    }

    #[test]
    fn matern_at_zero_is_one() {
        let m = KernelSpec::Matern {
            bandwidth: Some(2.0),
        };
        assert_eq!(m.eval(0.0, 0.0).unwrap(), 1.0);
        let r = 3f64.sqrt();
        assert!((m.eval(2.0, 0.0).unwrap() - (1.0 + r) * (-r).exp()).abs() < 1e-15);
    }

    #[test]
    fn similarity_kernels_clamp() {
        assert_eq!(KernelSpec::Linear.eval(0.0, -0.2).unwrap(), 0.0);
        assert_eq!(KernelSpec::Linear.eval(0.0, 0.4).unwrap(), 0.4);
        let p = KernelSpec::Polynomial {
            degree: 3,
            offset: 0.5,
        };
        assert_eq!(p.eval(0.0, -1.0).unwrap(), 0.125);
        assert!((p.eval(0.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_bandwidth_rejected() {
        for bw in [0.0, -1.0, f64::NAN] {
            let g = KernelSpec::Gaussian {
                bandwidth: Some(bw),
            };
            assert!(g.validate().is_err());
            assert!(matches!(g.eval(0.1, 0.0), Err(Error::InvalidSpec(_))));
        }
        assert!(KernelSpec::Gaussian { bandwidth: None }.eval(0.1, 0.0).is_err());
        assert!(KernelSpec::Polynomial {
            degree: 0,
            offset: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn median_heuristic() {
        assert_eq!(median_bandwidth(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median_bandwidth(&[0.1, 0.2, 0.3, 0.4]), 0.25);
        assert_eq!(median_bandwidth(&[0.0, 0.0, 0.5]), 0.5);
        assert_eq!(median_bandwidth(&[0.0, 0.0]), 1.0);
        let k = KernelSpec::default().resolve(&[0.1, 0.2, 0.3]);
        assert_eq!(k, KernelSpec::Gaussian { bandwidth: Some(0.2) });
    }

    #[test]
    fn serde_shape() {
        let k: KernelSpec = serde_json::from_str(r#"{"kind":"gaussian","bandwidth":0.5}"#).unwrap();
        assert_eq!(k, KernelSpec::Gaussian { bandwidth: Some(0.5) });
        let k: KernelSpec = serde_json::from_str(r#"{"kind":"matern"}"#).unwrap();
        assert_eq!(k, KernelSpec::Matern { bandwidth: None });
        assert_eq!("linear".parse::<KernelSpec>().unwrap(), KernelSpec::Linear);
    }

    proptest! {
        #[test]
        fn distance_kernels_bounded_and_monotone(
            mut ds in proptest::collection::vec(0.0f64..10.0, 2..40),
            sigma in 0.05f64..5.0,
        ) {
            ds.sort_by(f64::total_cmp);
            for k in [
                KernelSpec::Gaussian { bandwidth: Some(sigma) },
                KernelSpec::Matern { bandwidth: Some(sigma) },
            ] {
                let vals: Vec<f64> = ds.iter().map(|&d| k.eval(d, 0.0).unwrap()).collect();
                for w in vals.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
                prop_assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn linear_bounded(s in -1.0f64..=1.0) {
            let v = KernelSpec::Linear.eval(0.0, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
