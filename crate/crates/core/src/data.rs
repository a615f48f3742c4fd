//! In-memory image classification datasets.
//!
//! Images are stored as raw `u8` planes in NCHW order and converted to
//! normalized `f64` tensors at batch-assembly time. Augmentation (pad-4
//! random crop plus horizontal flip, the usual 32×32 recipe) happens on the
//! fly from an explicit RNG so training runs are reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// A labeled dataset held fully in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `len · channels · height · width` raw pixel bytes, NCHW.
    images: Vec<u8>,
    labels: Vec<u8>,
    /// Per-channel normalization constants applied at batch time.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        let plane = channels * height * width;
        if plane == 0 {
            return Err(Error::InvalidArgument("dataset with empty image shape".into()));
        }
        if images.len() != labels.len() * plane {
            return Err(Error::InvalidArgument(format!(
                "image bytes ({}) do not match {} labels × {} pixels",
                images.len(),
                labels.len(),
                plane
            )));
        }
        if mean.len() != channels || std.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "normalization constants for {} channels, want {}",
                mean.len().max(std.len()),
                channels
            )));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("non-positive normalization std".into()));
        }
        Ok(Self { name: name.into(), channels, height, width, images, labels, mean, std })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let plane = self.channels * self.height * self.width;
        &self.images[i * plane..(i + 1) * plane]
    }

    /// Number of distinct labels (assumes 0-based contiguous classes).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize).max().map_or(0, |m| m + 1)
    }

    /// Assembles a normalized `[B,C,H,W]` batch for the given sample indices.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let plane = self.height * self.width;
        let mut out = Tensor::zeros(&[idxs.len(), self.channels, self.height, self.width]);
        {
            let od = out.data_mut();
            for (bi, &i) in idxs.iter().enumerate() {
                let src = self.image_bytes(i);
                for c in 0..self.channels {
                    let (m, s) = (self.mean[c], self.std[c]);
                    let dst = &mut od[(bi * self.channels + c) * plane..][..plane];
                    for (d, &px) in dst.iter_mut().zip(&src[c * plane..c * plane + plane]) {
                        *d = (px as f64 / 255.0 - m) / s;
                    }
                }
            }
        }
        (out, idxs.iter().map(|&i| self.label(i)).collect())
    }

    /// Like [`Dataset::batch`] but with pad-4 random crop and 50% horizontal
    /// flip per sample, drawn from `rng` in a fixed order (crop-y, crop-x,
    /// flip). Padding pixels are zeros, i.e. the per-channel normalized value
    /// of a black pixel.
    pub fn batch_augmented<R: Rng>(&self, idxs: &[usize], rng: &mut R) -> (Tensor, Vec<usize>) {
        const PAD: usize = 4;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut out = Tensor::zeros(&[idxs.len(), self.channels, h, w]);
        {
            let od = out.data_mut();
            for (bi, &i) in idxs.iter().enumerate() {
                let dy = rng.gen_range(0..=2 * PAD);
                let dx = rng.gen_range(0..=2 * PAD);
                let flip = rng.gen_bool(0.5);
                let src = self.image_bytes(i);
                for c in 0..self.channels {
                    let (m, s) = (self.mean[c], self.std[c]);
                    let sp = &src[c * plane..(c + 1) * plane];
                    let dst = &mut od[(bi * self.channels + c) * plane..][..plane];
                    for y in 0..h {
                        // crop window row y maps to padded-image row y+dy,
                        // i.e. source row y+dy−PAD when inside the image
                        let sy = (y + dy).checked_sub(PAD).filter(|&v| v < h);
                        for x in 0..w {
                            let sx = (x + dx).checked_sub(PAD).filter(|&v| v < w);
                            let v = match (sy, sx) {
                                (Some(sy), Some(sx)) => {
                                    let sx = if flip { w - 1 - sx } else { sx };
                                    sp[sy * w + sx] as f64 / 255.0
                                }
                                _ => 0.0,
                            };
                            dst[y * w + x] = (v - m) / s;
                        }
                    }
                }
            }
        }
        (out, idxs.iter().map(|&i| self.label(i)).collect())
    }

    /// A new dataset holding only the given samples (copies the bytes).
    pub fn subset(&self, idxs: &[usize]) -> Dataset {
        let plane = self.channels * self.height * self.width;
        let mut images = Vec::with_capacity(idxs.len() * plane);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            images.extend_from_slice(self.image_bytes(i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, ..self.clone_meta() }
    }

    /// Deterministic class-balanced index selection: the first `per_class`
    /// occurrences of every class in dataset order.
    pub fn balanced_indices(&self, per_class: usize) -> Vec<usize> {
        let nc = self.num_classes();
        let mut taken = vec![0usize; nc];
        let mut out = Vec::with_capacity(per_class * nc);
        for i in 0..self.len() {
            let l = self.label(i);
            if taken[l] < per_class {
                taken[l] += 1;
                out.push(i);
            }
        }
        out
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            images: Vec::new(),
            labels: Vec::new(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

/// Standard normalization constants for the two supported datasets.
pub fn mnist_normalization() -> (Vec<f64>, Vec<f64>) {
    (vec![0.1307], vec![0.3081])
}

pub fn cifar10_normalization() -> (Vec<f64>, Vec<f64>) {
    (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Dataset {
        // 4 images, 1×4×4, pixel value = image index × 10 + flat position
        let mut images = Vec::new();
        for i in 0..4u8 {
            for p in 0..16u8 {
                images.push(i * 10 + p);
            }
        }
        Dataset::new("toy", 1, 4, 4, images, vec![0, 1, 2, 1], vec![0.5], vec![0.25]).unwrap()
    }

    #[test]
    fn batch_normalizes_pixels() {
        let d = toy();
        let (t, labels) = d.batch(&[2, 0]);
        assert_eq!(t.shape(), &[2, 1, 4, 4]);
        assert_eq!(labels, vec![2, 0]);
        // first value of image 2 is pixel 20 → (20/255 − 0.5)/0.25
        let expect = (20.0 / 255.0 - 0.5) / 0.25;
        assert!((t.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn length_mismatches_are_rejected() {
        assert!(Dataset::new("bad", 1, 4, 4, vec![0u8; 15], vec![0], vec![0.5], vec![0.25]).is_err());
        assert!(Dataset::new("bad", 1, 4, 4, vec![0u8; 16], vec![0], vec![0.5, 0.1], vec![0.25]).is_err());
        assert!(Dataset::new("bad", 1, 4, 4, vec![0u8; 16], vec![0], vec![0.5], vec![0.0]).is_err());
    }

    #[test]
    fn subset_preserves_bytes_and_labels() {
        let d = toy();
        let s = d.subset(&[3, 1]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.label(0), 1);
        assert_eq!(s.image_bytes(0)[0], 30);
        assert_eq!(s.image_bytes(1)[5], 15);
    }

    #[test]
    fn balanced_indices_take_first_occurrences() {
        let d = toy();
        // classes are [0,1,2,1]; one per class → indices [0,1,2]
        assert_eq!(d.balanced_indices(1), vec![0, 1, 2]);
        assert_eq!(d.balanced_indices(2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn augmented_batch_is_deterministic_under_a_seeded_rng() {
        let d = toy();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (a, _) = d.batch_augmented(&[0, 1, 2, 3], &mut r1);
        let (b, _) = d.batch_augmented(&[0, 1, 2, 3], &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn augmented_pixels_come_from_the_padded_plane() {
        let d = toy();
        let zero = (0.0 - 0.5) / 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // every augmented pixel is either the normalized zero padding or a
        // normalization of some original pixel of the same image
        for _ in 0..20 {
            let (t, _) = d.batch_augmented(&[1], &mut rng);
            for &v in t.data() {
                let source_pixel = (v * 0.25 + 0.5) * 255.0;
                let ok = (v - zero).abs() < 1e-12
                    || (source_pixel.round() - source_pixel).abs() < 1e-9
                        && (10.0..=25.0).contains(&source_pixel.round());
                assert!(ok, "pixel {v} not reachable from image 1");
            }
        }
    }
}
