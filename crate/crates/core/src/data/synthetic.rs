//! Class-conditional oriented gratings.
//!
//! Class `k` of `K` draws a sinusoidal grating whose orientation and spatial
//! frequency are fixed by `k`; phase, contrast and colour tint are random per
//! image and Gaussian pixel noise is added on top. Labels cycle through the
//! classes, so every class has `n / K` or `n / K + 1` samples.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// Standard deviation of the additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_classes() -> usize {
    10
}

fn default_size() -> usize {
    16
}

fn default_noise() -> f32 {
    0.3
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: default_classes(),
            image_size: default_size(),
            noise: default_noise(),
        }
    }
}

/// Orientation (radians) and cycles per image of class `k`.
fn class_pattern(k: usize, classes: usize) -> (f32, f32) {
    let orientations = classes.div_ceil(2);
    let angle = PI * (k % orientations) as f32 / orientations as f32;
    let freq = if k < orientations { 2.0 } else { 4.0 };
    (angle, freq)
}

impl SyntheticConfig {
    pub fn generate(&self, seed: u64, n: usize) -> Result<Dataset> {
        let k = self.num_classes;
        if k < 2 || n < k {
            return Err(Error::invalid(format!("synthetic data needs n >= num_classes >= 2, got n={n}, classes={k}")));
        }
        if self.image_size == 0 || !(self.noise >= 0.0) {
            return Err(Error::invalid("synthetic data needs a positive image size and non-negative noise"));
        }
        let s = self.image_size;
        let noise = Normal::new(0.0f32, self.noise).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % k;
            let (angle, freq) = class_pattern(label, k);
            let (ca, sa) = (angle.cos(), angle.sin());
            let phase = rng.random_range(0.0..2.0 * PI);
            let contrast = rng.random_range(0.6f32..1.0);
            let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.5f32..1.0));
            for t in tint {
                for y in 0..s {
                    for x in 0..s {
                        let u = (x as f32 * ca + y as f32 * sa) / s as f32;
                        let v = 0.5 + 0.5 * contrast * t * (2.0 * PI * freq * u + phase).sin();
                        images.push(v + noise.sample(&mut rng));
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(3, s, s, k, images, labels)
    }
}

/// `n` synthetic images over `num_classes` classes with default geometry.
pub fn synthetic_dataset(seed: u64, n: usize, num_classes: usize) -> Result<Dataset> {
    SyntheticConfig {
        num_classes,
        ..Default::default()
    }
    .generate(seed, n)
}
