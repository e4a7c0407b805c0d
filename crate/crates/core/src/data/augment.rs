use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-time augmentation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    /// Zero-pad by 4 pixels, then take a random crop of the original size.
    #[serde(default)]
    pub crop: bool,
    /// Mirror horizontally with probability 1/2.
    #[serde(default)]
    pub mirror: bool,
}

impl AugmentFlags {
    pub fn any(&self) -> bool {
        self.crop || self.mirror
    }
}

pub const CROP_PAD: usize = 4;

/// Crop of a `CROP_PAD`-padded image at offset `(dy, dx)`, each in
/// `0..=2*CROP_PAD`. Offset `(CROP_PAD, CROP_PAD)` is the identity.
pub fn crop(img: &[f32], c: usize, h: usize, w: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize + dy as isize - CROP_PAD as isize;
            if si < 0 || si as usize >= h {
                continue;
            }
            for j in 0..w {
                let sj = j as isize + dx as isize - CROP_PAD as isize;
                if sj < 0 || sj as usize >= w {
                    continue;
                }
                out[(ch * h + i) * w + j] = img[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    out
}

/// Horizontal flip.
pub fn mirror(img: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(w).take(c * h) {
        row.reverse();
    }
    out
}

/// Applies the enabled augmentations. The rng is consumed for the crop
/// offsets first, then the mirror coin.
pub fn augment<R: Rng + ?Sized>(img: &[f32], c: usize, h: usize, w: usize, rng: &mut R, flags: AugmentFlags) -> Vec<f32> {
    let mut out = if flags.crop {
        let dy = rng.random_range(0..=2 * CROP_PAD);
        let dx = rng.random_range(0..=2 * CROP_PAD);
        crop(img, c, h, w, dy, dx)
    } else {
        img.to_vec()
    };
    if flags.mirror && rng.random_bool(0.5) {
        out = mirror(&out, c, h, w);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn flags_off_is_identity() {
        let img: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, 3, 4, 4, &mut rng, AugmentFlags::default()), img);
        assert_eq!(crop(&img, 3, 4, 4, CROP_PAD, CROP_PAD), img);
    }

    #[test]
    fn mirror_is_an_involution() {
        let img: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let once = mirror(&img, 2, 3, 4);
        assert_eq!(&once[..4], &[3., 2., 1., 0.]);
        assert_eq!(mirror(&once, 2, 3, 4), img);
    }

    #[test]
    fn crop_shifts_with_zero_fill() {
        let img: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        // shift content right and down by one
        let out = crop(&img, 1, 4, 4, CROP_PAD - 1, CROP_PAD - 1);
        assert_eq!(&out[..4], &[0., 0., 0., 0.]);
        assert_eq!(&out[4..8], &[0., 1., 2., 3.]);
    }
}
