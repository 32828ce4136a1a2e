//! Gaussian blobs around fixed centroids.
//!
//! Centroid layout: with one feature, centroids are evenly spaced on
//! `[-1, 1]`; otherwise class `c` of `n` sits at `(cos 2πc/n, sin 2πc/n)`
//! in the first two dimensions and 0 elsewhere, so two classes land at
//! `(±1, 0)`. Sample `i` has class `i mod n`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Standard deviation of each coordinate around its centroid.
    pub spread: f64,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.n_features < 1 {
            return Err(Error::config("synthetic data needs at least 1 feature"));
        }
        if self.n_samples < 1 {
            return Err(Error::config("synthetic data needs at least 1 sample"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::config(format!(
                "spread must be non-negative, got {}",
                self.spread
            )));
        }
        Ok(())
    }
}

pub fn centroid(class: usize, n_classes: usize, n_features: usize) -> Vec<f64> {
    let mut c = vec![0.0; n_features];
    if n_features == 1 {
        c[0] = -1.0 + 2.0 * class as f64 / (n_classes - 1) as f64;
    } else {
        let angle = std::f64::consts::TAU * class as f64 / n_classes as f64;
        c[0] = angle.cos();
        c[1] = angle.sin();
    }
    c
}

pub fn gen_synthetic(params: &SyntheticParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    let centroids: Vec<Vec<f64>> = (0..params.n_classes)
        .map(|c| centroid(c, params.n_classes, params.n_features))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(params.n_samples * params.n_features);
    let mut labels = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let class = i % params.n_classes;
        for &x in &centroids[class] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(x + params.spread * noise);
        }
        labels.push(class);
    }
    Ok(Dataset {
        features,
        labels,
        n_features: params.n_features,
        n_classes: params.n_classes,
    })
}
