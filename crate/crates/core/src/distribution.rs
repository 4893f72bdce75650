//! Isotropic synthetic distributions used by the simulation harness.
//!
//! Every family takes scalar parameters that apply to each coordinate, e.g.
//! `mean = 2` means the mean vector `2·1`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub variance: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Gaussian {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        variance: f64,
    },
    GaussianMixture {
        components: Vec<MixtureComponent>,
    },
    /// Coordinates `location + Laplace(scale)`.
    Laplace {
        #[serde(default)]
        location: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Coordinates uniform on `[low, high]`.
    Uniform {
        low: f64,
        high: f64,
    },
    /// Coordinates `shift + Exp(rate)`.
    Exponential {
        #[serde(default = "one")]
        rate: f64,
        #[serde(default)]
        shift: f64,
    },
    /// Resample observed rows uniformly with replacement.
    Empirical {
        rows: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub dim: usize,
    #[serde(flatten)]
    pub family: Family,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite, got {v}")))
    }
}

impl DistributionSpec {
    pub fn gaussian(dim: usize, mean: f64, variance: f64) -> Self {
        Self {
            dim,
            family: Family::Gaussian { mean, variance },
        }
    }

    pub fn mixture(dim: usize, components: Vec<MixtureComponent>) -> Self {
        Self {
            dim,
            family: Family::GaussianMixture { components },
        }
    }

    pub fn empirical(rows: Vec<Vec<f64>>) -> Self {
        Self {
            dim: rows.first().map_or(0, Vec::len),
            family: Family::Empirical { rows },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("distribution dimension must be >= 1"));
        }
        match &self.family {
            Family::Gaussian { mean, variance } => {
                finite("mean", *mean)?;
                positive("variance", *variance)
            }
            Family::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(Error::invalid("mixture needs at least one component"));
                }
                let mut total = 0.0;
                for c in components {
                    finite("mean", c.mean)?;
                    positive("variance", c.variance)?;
                    if !(c.weight.is_finite() && c.weight >= 0.0) {
                        return Err(Error::invalid(format!("mixture weight must be >= 0, got {}", c.weight)));
                    }
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("mixture weights must sum to 1, got {total}")));
                }
                Ok(())
            }
            Family::Laplace { location, scale } => {
                finite("location", *location)?;
                positive("scale", *scale)
            }
            Family::Uniform { low, high } => {
                finite("low", *low)?;
                finite("high", *high)?;
                if low < high {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("uniform needs low < high, got [{low}, {high}]")))
                }
            }
            Family::Exponential { rate, shift } => {
                finite("shift", *shift)?;
                positive("rate", *rate)
            }
            Family::Empirical { rows } => {
                if rows.is_empty() {
                    return Err(Error::invalid("empirical distribution needs at least one row"));
                }
                for r in rows {
                    check_dim(self.dim, r.len())?;
                    if r.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid("empirical rows must be finite"));
                    }
                }
                Ok(())
            }
        }
    }

    /// One draw. Assumes the spec has been validated.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim;
        match &self.family {
            Family::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        mean + sd * z
                    })
                    .collect()
            }
            Family::GaussianMixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let c = &components[pick];
                let normal = Normal::new(c.mean, c.variance.sqrt()).expect("validated");
                (0..d).map(|_| normal.sample(rng)).collect()
            }
            Family::Laplace { location, scale } => (0..d)
                .map(|_| {
                    // difference of two exponentials is Laplace
                    let e1: f64 = Exp::new(1.0).expect("rate 1").sample(rng);
                    let e2: f64 = Exp::new(1.0).expect("rate 1").sample(rng);
                    location + scale * (e1 - e2)
                })
                .collect(),
            Family::Uniform { low, high } => (0..d).map(|_| rng.random_range(*low..*high)).collect(),
            Family::Exponential { rate, shift } => {
                let exp = Exp::new(*rate).expect("validated");
                (0..d).map(|_| shift + exp.sample(rng)).collect()
            }
            Family::Empirical { rows } => rows[rng.random_range(0..rows.len())].clone(),
        }
    }

    /// `n` i.i.d. draws, reproducible from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::invalid("sample size must be >= 1"));
        }
        let mut rng = stream_rng(seed, 0);
        Ok((0..n).map(|_| self.draw(&mut rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(xs: &[Vec<f64>], k: usize) -> f64 {
        xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn gaussian_mean_converges() {
        let n = 4000;
        let xs = DistributionSpec::gaussian(2, 0.0, 1.0).sample(n, 1).unwrap();
        for k in 0..2 {
            assert!(mean_of(&xs, k).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = DistributionSpec::gaussian(3, 1.0, 2.0);
        assert_eq!(spec.sample(10, 5).unwrap(), spec.sample(10, 5).unwrap());
        assert_ne!(spec.sample(10, 5).unwrap(), spec.sample(10, 6).unwrap());
    }

    #[test]
    fn degenerate_mixture_matches_first_component() {
        // two-sample Kolmogorov-Smirnov on the first coordinate
        let n = 2000;
        let mix = DistributionSpec::mixture(
            1,
            vec![
                MixtureComponent {
                    weight: 1.0,
                    mean: 0.5,
                    variance: 2.0,
                },
                MixtureComponent {
                    weight: 0.0,
                    mean: 50.0,
                    variance: 1.0,
                },
            ],
        );
        let mut a: Vec<f64> = mix.sample(n, 3).unwrap().into_iter().map(|v| v[0]).collect();
        let mut b: Vec<f64> = DistributionSpec::gaussian(1, 0.5, 2.0)
            .sample(n, 4)
            .unwrap()
            .into_iter()
            .map(|v| v[0])
            .collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut ks) = (0, 0, 0.0f64);
        while i < n && j < n {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 - j as f64).abs() / n as f64);
        }
        // 0.1% critical value for equal sizes: 1.95 * sqrt(2/n)
        assert!(ks < 1.95 * (2.0 / n as f64).sqrt(), "ks = {ks}");
    }

    #[test]
    fn uniform_support_and_other_families() {
        let spec = DistributionSpec {
            dim: 4,
            family: Family::Uniform { low: -1.0, high: 3.0 },
        };
        for v in spec.sample(500, 2).unwrap() {
            assert!(v.iter().all(|&c| (-1.0..3.0).contains(&c)));
        }
        let exp = DistributionSpec {
            dim: 2,
            family: Family::Exponential { rate: 2.0, shift: 1.0 },
        };
        let xs = exp.sample(4000, 1).unwrap();
        assert!(xs.iter().all(|v| v.iter().all(|&c| c >= 1.0)));
        assert!((mean_of(&xs, 0) - 1.5).abs() < 0.05);
        let lap = DistributionSpec {
            dim: 1,
            family: Family::Laplace {
                location: 2.0,
                scale: 1.0,
            },
        };
        assert!((mean_of(&lap.sample(4000, 1).unwrap(), 0) - 2.0).abs() < 0.1);
    }

    #[test]
    fn empirical_resamples_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let spec = DistributionSpec::empirical(rows.clone());
        for v in spec.sample(50, 1).unwrap() {
            assert!(rows.contains(&v));
        }
        assert!(DistributionSpec::empirical(vec![]).sample(1, 0).is_err());
    }

    #[test]
    fn invalid_parameters() {
        let bad = [
            DistributionSpec::gaussian(0, 0.0, 1.0),
            DistributionSpec::gaussian(2, 0.0, -1.0),
            DistributionSpec::mixture(
                2,
                vec![MixtureComponent {
                    weight: 0.5,
                    mean: 0.0,
                    variance: 1.0,
                }],
            ),
            DistributionSpec {
                dim: 2,
                family: Family::Uniform { low: 1.0, high: 1.0 },
            },
        ];
        for spec in bad {
            assert!(spec.sample(3, 0).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn serde_shape() {
        let json = r#"{"dim": 20, "kind": "gaussian_mixture",
            "components": [{"weight": 0.3}, {"weight": 0.7, "mean": 2, "variance": 9}]}"#;
        let spec: DistributionSpec = serde_json::from_str(json).unwrap();
        spec.validate().unwrap();
        match &spec.family {
            Family::GaussianMixture { components } => {
                assert_eq!(components[0].variance, 1.0);
                assert_eq!(components[1].mean, 2.0);
            }
            other => panic!("{other:?}"),
        }
        let back: DistributionSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
