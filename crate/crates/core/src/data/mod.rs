//! Image datasets, normalization and augmentation.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment, crop, mirror, AugmentFlags};
pub use cifar::{encode_cifar10_record, load_cifar10_binary, CIFAR10_RECORD_LEN};
pub use synthetic::{synthetic_dataset, SyntheticConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory labelled images, `N x C x H x W` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::invalid(format!(
                "{} pixel values for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// This dataset followed by `other`, which must have the same layout.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if (self.channels, self.height, self.width, self.num_classes)
            != (other.channels, other.height, other.width, other.num_classes)
        {
            return Err(Error::invalid("cannot concatenate datasets of different layouts"));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let hw = self.height * self.width;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, plane) in img.chunks(hw).enumerate() {
                for &v in plane {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt()) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// `(x - mean[c]) / std[c]` in place.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::invalid(format!(
                "normalization needs {} channels, got mean {} std {}",
                self.channels,
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("normalization std must be positive, got {s}")));
        }
        let hw = self.height * self.width;
        let per = self.image_len();
        for img in self.images.chunks_mut(per) {
            for (c, plane) in img.chunks_mut(hw).enumerate() {
                for v in plane {
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
        Ok(())
    }

    /// Stacks samples `indices` into an `N x C x H x W` tensor, augmenting
    /// each image when `augment_flags` is given.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        augment_flags: Option<AugmentFlags>,
        rng: &mut R,
    ) -> (Tensor, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            match augment_flags {
                Some(flags) if flags.any() => {
                    data.extend(augment(self.image(i), self.channels, self.height, self.width, rng, flags))
                }
                _ => data.extend_from_slice(self.image(i)),
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape");
        (t, labels)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn normalization_rejects_zero_std() {
        let mut d = Dataset::new(1, 1, 2, 2, vec![0.0, 1.0], vec![0]).unwrap();
        assert!(d.normalize(&[0.0], &[0.0]).is_err());
        d.normalize(&[0.5], &[0.5]).unwrap();
        assert_eq!(d.image(0), &[-1.0, 1.0]);
    }

    #[test]
    fn batch_stacks_in_order() {
        let d = Dataset::new(1, 1, 2, 3, vec![0., 1., 2., 3., 4., 5.], vec![0, 1, 2]).unwrap();
        let (t, labels) = d.batch(&[2, 0], None, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.shape(), &[2, 1, 1, 2]);
        assert_eq!(t.data(), &[4., 5., 0., 1.]);
        assert_eq!(labels, vec![2, 0]);
    }
}
