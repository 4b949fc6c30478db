//! Frozen random-projection feature map standing in for a pretrained backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matvec;
use crate::sim::Observation;

pub const DEFAULT_FEAT_DIM: usize = 32;
pub const VAR_FLOOR: f64 = 1e-6;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub proj: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl FeatureMap {
    /// Seeded Gaussian projection scaled by `1/sqrt(in_dim)`, with output
    /// statistics estimated over `dataset` and then frozen.
    pub fn calibrate(dataset: &[Observation], out_dim: usize, seed: u64) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::InvalidInput("calibration dataset is empty".into()))?;
        let in_dim = first.0.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let proj: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();

        // Two-pass moments for numerical stability.
        let mut mean = vec![0.0; out_dim];
        let mut projected = Vec::with_capacity(dataset.len());
        for obs in dataset {
            if obs.0.len() != in_dim {
                return Err(Error::DimensionMismatch {
                    expected: in_dim,
                    got: obs.0.len(),
                });
            }
            let y = matvec(&proj, out_dim, in_dim, &obs.0);
            for (m, v) in mean.iter_mut().zip(&y) {
                *m += v;
            }
            projected.push(y);
        }
        let n = dataset.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; out_dim];
        for y in &projected {
            for ((s, v), m) in var.iter_mut().zip(y).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut floored = 0;
        for v in var.iter_mut() {
            *v /= n;
            if *v < VAR_FLOOR {
                *v = VAR_FLOOR;
                floored += 1;
            }
        }
        if floored > 0 {
            log::warn!("{floored} feature coordinates had near-zero variance; floored at {VAR_FLOOR}");
        }
        Ok(Self {
            in_dim,
            out_dim,
            proj,
            mean,
            var,
        })
    }

    /// Projection before normalization.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.proj, self.out_dim, self.in_dim, x)
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.encode_slice(&obs.0)
    }

    pub fn encode_slice(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        let z: Vec<f64> = self
            .project(x)
            .into_iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(y, (m, v))| (y - m) / (v + NORM_EPS).sqrt())
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoded feature"));
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn normal_obs(n: usize, dim: usize, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Observation((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
            .collect()
    }

    #[test]
    fn calibrate_is_deterministic() {
        let data = normal_obs(200, 20, 1);
        let a = FeatureMap::calibrate(&data, 32, 7).unwrap();
        let b = FeatureMap::calibrate(&data, 32, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_dataset_hits_floor() {
        let data = vec![Observation(vec![0.3; 20]); 50];
        let fm = FeatureMap::calibrate(&data, 32, 1).unwrap();
        assert!(fm.var.iter().all(|&v| v == VAR_FLOOR));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(FeatureMap::calibrate(&[], 32, 1).is_err());
    }

    #[test]
    fn standard_normal_inputs_have_unit_scale_outputs() {
        let fm = FeatureMap::calibrate(&normal_obs(10_000, 20, 2), 32, 3).unwrap();
        let fresh = normal_obs(10_000, 20, 4);
        let zs: Vec<Vec<f64>> = fresh.iter().map(|o| fm.encode(o).unwrap()).collect();
        for j in 0..32 {
            let col: Vec<f64> = zs.iter().map(|z| z[j]).collect();
            let m = crate::linalg::mean(&col);
            let v = crate::linalg::sample_std(&col).powi(2);
            assert!(m.abs() < 0.1, "mean {m}");
            assert!((0.5..=2.0).contains(&v), "var {v}");
        }
    }

    #[test]
    fn projection_is_linear() {
        let fm = FeatureMap::calibrate(&normal_obs(100, 20, 5), 32, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (pa, pb, pab) = (fm.project(&a), fm.project(&b), fm.project(&ab));
        for i in 0..32 {
            assert!((pa[i] + pb[i] - pab[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_preimage_maps_near_zero() {
        let data = normal_obs(500, 20, 8);
        let fm = FeatureMap::calibrate(&data, 32, 1).unwrap();
        let mut centroid = vec![0.0; 20];
        for o in &data {
            for (c, x) in centroid.iter_mut().zip(&o.0) {
                *c += x / data.len() as f64;
            }
        }
        let z = fm.encode_slice(&centroid).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn encode_is_stateless_and_checks_dims() {
        let fm = FeatureMap::calibrate(&normal_obs(100, 20, 1), 32, 1).unwrap();
        let o = Observation(vec![0.1; 20]);
        assert_eq!(fm.encode(&o).unwrap(), fm.encode(&o).unwrap());
        assert!(fm.encode(&Observation(vec![0.0; 19])).is_err());
    }

    #[test]
    fn distinct_observations_stay_distinct() {
        let fm = FeatureMap::calibrate(&normal_obs(100, 20, 1), 32, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 1000 {
            let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            if crate::linalg::norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>()) <= 0.1 {
                continue;
            }
            let (za, zb) = (fm.encode_slice(&a).unwrap(), fm.encode_slice(&b).unwrap());
            assert!(za.iter().zip(&zb).any(|(x, y)| x != y));
            checked += 1;
        }
    }
}
