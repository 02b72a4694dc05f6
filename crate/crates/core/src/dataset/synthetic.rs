//! Procedurally rendered datasets whose images encode their attribute vectors.
//!
//! The canvas is a grid of 8-pixel cells, `cols = size / 8` per side, centred
//! by a margin of `(size - 8 * cols) / 2`. With `A` attributes, attribute `j`
//! owns cell `j * cols² / A` in row-major order, which spreads the patches
//! over the whole canvas. A present attribute paints a 6×6 patch inset by one pixel
//! in its cell. Every attribute also has its own appearance, a pair of
//! texture and color, so that it can be recognized without knowing where it
//! sits. Textures are symmetric under horizontal flips. Capacity is the
//! smaller of the cell count and the number of distinct appearances.

use std::collections::HashSet;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttributeDataset, AttributeTable, Granularity, SplitSpec};
use crate::error::{Error, Result};

pub const CELL: usize = 8;
pub const PATCH: usize = 6;
const TEXTURES: usize = 8;
const COLORS: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];

/// Whether pixel `(x, y)` of a patch is lit for texture `t`.
fn lit(t: usize, x: usize, y: usize) -> bool {
    match t {
        0 => y.is_multiple_of(2),
        1 => matches!(x, 0 | 2 | 3 | 5),
        2 => (x / 2 + y / 2).is_multiple_of(2),
        3 => x == 0 || y == 0 || x == PATCH - 1 || y == PATCH - 1,
        4 => matches!(x, 2 | 3) || matches!(y, 2 | 3),
        5 => x == y || x == PATCH - 1 - y,
        6 => matches!(x, 0 | 1 | 4 | 5) && matches!(y, 0 | 1 | 4 | 5),
        _ => true,
    }
}

/// `(texture, color)` of attribute `j`; distinct for `j < 24`.
pub fn appearance(j: usize) -> (usize, [u8; 3]) {
    let (round, texture) = (j / TEXTURES, j % TEXTURES);
    (texture, COLORS[(texture + round) % COLORS.len()])
}

fn default_image_size() -> usize {
    84
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub samples_per_class: usize,
    /// Uniform per-pixel noise amplitude as a fraction of the full range.
    pub noise_level: f64,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Per-image probability of flipping each class attribute, applied to
    /// base classes only. Validation and novel images keep their class row.
    /// When positive the dataset carries per-image annotations.
    #[serde(default)]
    pub base_attribute_flip: f64,
    /// Per-image probability of rendering each attribute of a validation or
    /// novel image flipped while its annotation keeps the class row, as when
    /// an attribute is hidden or a look-alike appears.
    #[serde(default)]
    pub held_out_visual_flip: f64,
    /// Consecutive base / validation / novel class counts. Defaults to a
    /// 2:1:1 partition.
    #[serde(default)]
    pub split: Option<[usize; 3]>,
}

impl SyntheticSpec {
    pub fn new(
        num_classes: usize,
        num_attributes: usize,
        samples_per_class: usize,
        noise_level: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            num_attributes,
            samples_per_class,
            noise_level,
            seed,
            image_size: 84,
            base_attribute_flip: 0.0,
            held_out_visual_flip: 0.0,
            split: None,
        }
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn with_base_attribute_flip(mut self, p: f64) -> Self {
        self.base_attribute_flip = p;
        self
    }

    pub fn with_held_out_visual_flip(mut self, p: f64) -> Self {
        self.held_out_visual_flip = p;
        self
    }

    pub fn with_split(mut self, base: usize, validation: usize, novel: usize) -> Self {
        self.split = Some([base, validation, novel]);
        self
    }

    fn grid(&self) -> (usize, usize) {
        let cols = self.image_size / CELL;
        (cols, (self.image_size - CELL * cols) / 2)
    }

    /// Largest number of attributes the canvas can encode.
    pub fn capacity(&self) -> usize {
        let (cols, _) = self.grid();
        (cols * cols).min(TEXTURES * COLORS.len())
    }

    /// Top-left pixel `(x, y)` of attribute `j`'s patch.
    pub fn patch_origin(&self, j: usize) -> (usize, usize) {
        let (cols, margin) = self.grid();
        let cell = j * cols * cols / self.num_attributes;
        (
            margin + (cell % cols) * CELL + 1,
            margin + (cell / cols) * CELL + 1,
        )
    }

    fn split_counts(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let base = self.num_classes / 2;
            let validation = (self.num_classes - base) / 2;
            [base, validation, self.num_classes - base - validation]
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_attributes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "synthetic spec needs classes, attributes and samples".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!(
                "noise_level {} outside [0, 1]",
                self.noise_level
            )));
        }
        if !(0.0..0.5).contains(&self.base_attribute_flip) {
            return Err(Error::Config(format!(
                "base_attribute_flip {} outside [0, 0.5)",
                self.base_attribute_flip
            )));
        }
        if !(0.0..0.5).contains(&self.held_out_visual_flip) {
            return Err(Error::Config(format!(
                "held_out_visual_flip {} outside [0, 0.5)",
                self.held_out_visual_flip
            )));
        }
        if self.num_attributes > self.capacity() {
            return Err(Error::Config(format!(
                "{} attributes exceed the capacity {} of a {}x{} canvas",
                self.num_attributes,
                self.capacity(),
                self.image_size,
                self.image_size
            )));
        }
        if self.num_attributes < usize::BITS as usize
            && self.num_classes > 1usize << self.num_attributes
        {
            return Err(Error::Config(format!(
                "{} classes cannot have distinct vectors over {} attributes",
                self.num_classes, self.num_attributes
            )));
        }
        let [b, v, n] = self.split_counts();
        if b == 0 || v == 0 || n == 0 || b + v + n > self.num_classes {
            return Err(Error::Config(format!(
                "split {b}/{v}/{n} invalid for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Noise-free rendering of one attribute vector.
    pub fn render(&self, attributes: &[u8]) -> RgbImage {
        let mut img = RgbImage::new(self.image_size as u32, self.image_size as u32);
        for (j, _) in attributes.iter().enumerate().filter(|(_, a)| **a == 1) {
            let (x0, y0) = self.patch_origin(j);
            let (texture, color) = appearance(j);
            for y in 0..PATCH {
                for x in 0..PATCH {
                    if lit(texture, x, y) {
                        img.put_pixel((x0 + x) as u32, (y0 + y) as u32, image::Rgb(color));
                    }
                }
            }
        }
        img
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<AttributeDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.num_attributes;

    let mut seen = HashSet::new();
    let mut class_rows: Vec<Vec<u8>> = Vec::with_capacity(spec.num_classes);
    while class_rows.len() < spec.num_classes {
        let row: Vec<u8> = (0..a).map(|_| u8::from(rng.random_bool(0.5))).collect();
        if seen.insert(row.clone()) {
            class_rows.push(row);
        }
    }

    let amplitude = spec.noise_level * 255.0;
    let mut images = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut image_ids = Vec::with_capacity(images.capacity());
    let mut labels = Vec::with_capacity(images.capacity());
    let mut image_rows = Vec::new();
    let [b, v, n] = spec.split_counts();
    for (c, row) in class_rows.iter().enumerate() {
        let clean = spec.render(row);
        let (flip, visual) = if c < b {
            (spec.base_attribute_flip, 0.0)
        } else {
            (0.0, spec.held_out_visual_flip)
        };
        for _ in 0..spec.samples_per_class {
            let mut img = if flip > 0.0 {
                let own: Vec<u8> = row
                    .iter()
                    .map(|v| v ^ u8::from(rng.random_bool(flip)))
                    .collect();
                let img = spec.render(&own);
                image_rows.extend(own);
                img
            } else if visual > 0.0 {
                let seen: Vec<u8> = row
                    .iter()
                    .map(|v| v ^ u8::from(rng.random_bool(visual)))
                    .collect();
                image_rows.extend_from_slice(row);
                spec.render(&seen)
            } else {
                image_rows.extend_from_slice(row);
                clean.clone()
            };
            if amplitude > 0.0 {
                for v in img.iter_mut() {
                    let noisy = *v as f64 + rng.random_range(-amplitude..=amplitude);
                    *v = noisy.round().clamp(0.0, 255.0) as u8;
                }
            }
            image_ids.push(format!("{:06}.png", images.len()));
            images.push(img);
            labels.push(c);
        }
    }

    let class_ids: Vec<u32> = (0..spec.num_classes as u32).collect();
    let split = SplitSpec::consecutive(&class_ids, b, v, n)?;
    AttributeDataset::new(
        images,
        image_ids,
        labels,
        class_ids,
        (0..spec.num_classes)
            .map(|c| format!("class_{c:03}"))
            .collect(),
        (0..a).map(|j| format!("attr_{j:03}")).collect(),
        if spec.base_attribute_flip > 0.0 {
            AttributeTable::new(Granularity::PerImage, a, image_rows)?
        } else {
            AttributeTable::new(Granularity::PerClass, a, class_rows.concat())?
        },
        Some(split),
    )
}
