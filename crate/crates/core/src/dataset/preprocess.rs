//! Resizing, per-channel standardization and training-time augmentation.

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AttributeDataset;
use crate::error::{Error, Result};

/// Dataset-level per-channel statistics of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Training-time augmentation: horizontal flip and color jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 - j, 1 + j]`.
    pub jitter: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter: 0.4,
        }
    }
}

/// Every dataset image resized to `size × size` and stored channel-major.
#[derive(Debug, Clone)]
pub struct PreparedImages {
    size: usize,
    pixels: Vec<Vec<u8>>,
}

impl PreparedImages {
    pub fn new(dataset: &AttributeDataset, size: usize) -> Self {
        let pixels = (0..dataset.len())
            .map(|i| {
                let img = dataset.image(i);
                let resized;
                let img = if img.width() as usize == size && img.height() as usize == size {
                    img
                } else {
                    resized = image::imageops::resize(
                        img,
                        size as u32,
                        size as u32,
                        FilterType::Triangle,
                    );
                    &resized
                };
                let plane = size * size;
                let mut chw = vec![0u8; 3 * plane];
                for (p, px) in img.pixels().enumerate() {
                    for c in 0..3 {
                        chw[c * plane + p] = px.0[c];
                    }
                }
                chw
            })
            .collect();
        Self { size, pixels }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u8] {
        &self.pixels[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTransform {
    pub size: usize,
    pub stats: ChannelStats,
}

impl ImageTransform {
    /// Fits standardization statistics on the listed images.
    pub fn fit(images: &PreparedImages, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config(
                "cannot fit image statistics on zero images".into(),
            ));
        }
        let plane = images.size() * images.size();
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for &i in indices {
            let px = images.get(i);
            for c in 0..3 {
                for &v in &px[c * plane..(c + 1) * plane] {
                    let x = v as f64 / 255.0;
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        let n = (indices.len() * plane) as f64;
        let mut stats = ChannelStats::identity();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            stats.mean[c] = mean as f32;
            stats.std[c] = var.sqrt().max(1e-3) as f32;
        }
        Ok(Self {
            size: images.size(),
            stats,
        })
    }

    /// Standardized `(B, 3, size, size)` batch; augmentation is applied when given.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        images: &PreparedImages,
        indices: &[usize],
        mut augment: Option<(&Augmentation, &mut R)>,
    ) -> Result<Tensor> {
        if images.size() != self.size {
            return Err(Error::Validation(format!(
                "images prepared at {0}x{0}, transform expects {1}x{1}",
                images.size(),
                self.size
            )));
        }
        let plane = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * 3 * plane);
        let mut buf = vec![0f32; 3 * plane];
        for &i in indices {
            for (b, &v) in buf.iter_mut().zip(images.get(i)) {
                *b = v as f32 / 255.0;
            }
            if let Some((aug, rng)) = augment.as_mut() {
                apply_augmentation(&mut buf, self.size, aug, &mut **rng);
            }
            for c in 0..3 {
                let (m, s) = (self.stats.mean[c], self.stats.std[c]);
                data.extend(buf[c * plane..(c + 1) * plane].iter().map(|x| (x - m) / s));
            }
        }
        Ok(Tensor::from_vec(
            data,
            (indices.len(), 3, self.size, self.size),
            &Device::Cpu,
        )?)
    }
}

fn apply_augmentation<R: Rng + ?Sized>(
    chw: &mut [f32],
    size: usize,
    aug: &Augmentation,
    rng: &mut R,
) {
    let plane = size * size;
    if rng.random_bool(aug.flip_prob.clamp(0.0, 1.0)) {
        for c in 0..3 {
            for row in chw[c * plane..(c + 1) * plane].chunks_mut(size) {
                row.reverse();
            }
        }
    }
    if aug.jitter <= 0.0 {
        return;
    }
    let j = aug.jitter as f32;
    let mut factor = || rng.random_range((1.0 - j).max(0.0)..=1.0 + j);
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    for v in chw.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let gray = |chw: &[f32], p: usize| {
        0.299 * chw[p] + 0.587 * chw[plane + p] + 0.114 * chw[2 * plane + p]
    };
    let mean_gray = (0..plane).map(|p| gray(chw, p)).sum::<f32>() / plane as f32;
    for v in chw.iter_mut() {
        *v = ((*v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0);
    }
    for p in 0..plane {
        let g = gray(chw, p);
        for c in 0..3 {
            let v = &mut chw[c * plane + p];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::tiny;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resizes_and_standardizes() {
        let ds = tiny(3, 2, 2);
        let prepared = PreparedImages::new(&ds, 16);
        assert_eq!(prepared.get(0).len(), 3 * 256);
        let all: Vec<usize> = (0..ds.len()).collect();
        let t = ImageTransform::fit(&prepared, &all).unwrap();
        let batch = t.batch::<ChaCha8Rng>(&prepared, &all, None).unwrap();
        assert_eq!(batch.dims(), &[6, 3, 16, 16]);
        let flat = batch.transpose(0, 1).unwrap().flatten_from(1).unwrap();
        let means = flat.mean(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(means[0].abs() < 1e-4 && means[1].abs() < 1e-4);
        // blue channel is constant zero: std floored, mean removed
        assert!(means[2].abs() < 1e-6);
    }

    #[test]
    fn flip_mirrors_rows() {
        let mut chw: Vec<f32> = (0..3 * 4).map(|v| v as f32 / 12.0).collect();
        let aug = Augmentation {
            flip_prob: 1.0,
            jitter: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        apply_augmentation(&mut chw, 2, &aug, &mut rng);
        assert_eq!(&chw[..4], &[1.0 / 12.0, 0.0, 3.0 / 12.0, 2.0 / 12.0]);
    }

    #[test]
    fn augmentation_is_seeded_and_bounded() {
        let ds = tiny(2, 2, 2);
        let prepared = PreparedImages::new(&ds, 8);
        let t = ImageTransform {
            size: 8,
            stats: ChannelStats::identity(),
        };
        let aug = Augmentation::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            t.batch(&prepared, &[0, 1, 2, 3], Some((&aug, &mut rng)))
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let ds = tiny(2, 1, 2);
        let prepared = PreparedImages::new(&ds, 8);
        let t = ImageTransform {
            size: 84,
            stats: ChannelStats::identity(),
        };
        assert!(t.batch::<ChaCha8Rng>(&prepared, &[0], None).is_err());
    }
}
