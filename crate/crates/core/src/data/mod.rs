//! Synthetic labeled embeddings and the binary file formats.

pub mod io;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LinkError, Result};
use crate::graph::FeatureStore;
use crate::numcore::{rng_stream, RngStream};

pub use io::{load_features, load_graph, load_labels, save_features, save_graph};

/// Parameters of the synthetic identity-cluster generator.
///
/// Each identity gets a random unit mean direction. A sample is its mean
/// plus isotropic Gaussian noise with per-coordinate standard deviation
/// `sigma_clean`, or `sigma_hard` for the `hard_fraction` of samples drawn
/// as hard cases, then renormalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub dim: usize,
    pub sigma_clean: f64,
    pub hard_fraction: f64,
    pub sigma_hard: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 50,
            samples_min: 20,
            samples_max: 20,
            dim: 32,
            sigma_clean: 0.1,
            hard_fraction: 0.2,
            sigma_hard: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LinkError::Config(format!("synthetic spec: {msg}")));
        if self.identities < 2 {
            return bad("need at least 2 identities");
        }
        if self.samples_min == 0 || self.samples_min > self.samples_max {
            return bad("need 1 <= samples_min <= samples_max");
        }
        if self.dim == 0 {
            return bad("dimension must be positive");
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction must lie in [0, 1]");
        }
        if !(self.sigma_clean > 0.0 && self.sigma_hard >= self.sigma_clean) {
            return bad("need sigma_hard >= sigma_clean > 0");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| LinkError::format(0, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draw a labeled store. Samples are grouped by identity; labels are
/// `0..identities`.
pub fn generate(spec: &SyntheticSpec) -> Result<FeatureStore> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, RngStream::Data);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for id in 0..spec.identities {
        let mean = unit_gaussian(&mut rng, spec.dim);
        let count = rng.random_range(spec.samples_min..=spec.samples_max);
        for _ in 0..count {
            let sigma = if rng.random::<f64>() < spec.hard_fraction {
                spec.sigma_hard
            } else {
                spec.sigma_clean
            };
            let sample: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + sigma * z
                })
                .collect();
            let norm = sample.iter().map(|x| x * x).sum::<f64>().sqrt();
            features.extend(sample.iter().map(|x| (x / norm) as f32));
            labels.push(id as i64);
        }
    }
    FeatureStore::new(labels.len(), spec.dim, features, Some(labels))
}
