//! Attribute-annotated image datasets, class splits and episode sampling.

pub mod episode;
pub mod io;
pub mod preprocess;
pub mod split;
pub mod synthetic;

pub use episode::{sample_episode, Episode, Protocol};
pub use io::{load_dataset, save_dataset, DatasetFormat};
pub use preprocess::{Augmentation, ChannelStats, ImageTransform};
pub use split::{split_dataset, DatasetView, SplitSpec, Splits};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerImage,
    PerClass,
}

/// Rounds a continuous annotation at 0.5; ties go to 1.
pub fn binarize(value: f64) -> u8 {
    u8::from(value >= 0.5)
}

/// Row-major binary attribute matrix. Rows are images or classes depending
/// on `granularity`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTable {
    granularity: Granularity,
    width: usize,
    values: Vec<u8>,
}

impl AttributeTable {
    pub fn new(granularity: Granularity, width: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Validation(
                "attribute table needs at least one attribute".into(),
            ));
        }
        if !values.len().is_multiple_of(width) {
            return Err(Error::Validation(format!(
                "attribute table of width {width} has {} entries",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| *v > 1) {
            return Err(Error::Validation(format!(
                "attribute row {} column {} holds non-binary value {}",
                pos / width,
                pos % width,
                values[pos]
            )));
        }
        Ok(Self {
            granularity,
            width,
            values,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    fn select_columns(&self, keep: &[usize]) -> Self {
        let values = (0..self.rows())
            .flat_map(|r| keep.iter().map(move |&c| self.values[r * self.width + c]))
            .collect();
        Self {
            granularity: self.granularity,
            width: keep.len(),
            values,
        }
    }
}

/// Images with class labels and binary attribute annotations.
///
/// Class labels are stored as dense indices `0..num_classes`; the external
/// ids used in files are kept in `class_ids`.
#[derive(Debug, Clone)]
pub struct AttributeDataset {
    images: Vec<RgbImage>,
    image_ids: Vec<String>,
    labels: Vec<usize>,
    class_ids: Vec<u32>,
    class_names: Vec<String>,
    attribute_names: Vec<String>,
    attributes: AttributeTable,
    splits: Option<SplitSpec>,
}

impl AttributeDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        images: Vec<RgbImage>,
        image_ids: Vec<String>,
        labels: Vec<usize>,
        class_ids: Vec<u32>,
        class_names: Vec<String>,
        attribute_names: Vec<String>,
        attributes: AttributeTable,
        splits: Option<SplitSpec>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != image_ids.len() {
            return Err(Error::Validation(format!(
                "{} images, {} image ids and {} labels",
                images.len(),
                image_ids.len(),
                labels.len()
            )));
        }
        if class_ids.len() != class_names.len() {
            return Err(Error::Validation(
                "class ids and class names differ in length".into(),
            ));
        }
        if let Some((i, l)) = labels
            .iter()
            .enumerate()
            .find(|(_, l)| **l >= class_ids.len())
        {
            return Err(Error::Validation(format!(
                "image {i} has class index {l} outside 0..{}",
                class_ids.len()
            )));
        }
        if attribute_names.len() != attributes.width() {
            return Err(Error::Validation(format!(
                "{} attribute names for {} attribute columns",
                attribute_names.len(),
                attributes.width()
            )));
        }
        let expected_rows = match attributes.granularity() {
            Granularity::PerImage => images.len(),
            Granularity::PerClass => class_ids.len(),
        };
        if attributes.rows() != expected_rows {
            return Err(Error::Validation(format!(
                "{:?} attributes have {} rows, expected {expected_rows}",
                attributes.granularity(),
                attributes.rows()
            )));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != class_ids.len() {
            return Err(Error::Validation("duplicate class ids".into()));
        }
        let ds = Self {
            images,
            image_ids,
            labels,
            class_ids,
            class_names,
            attribute_names,
            attributes,
            splits,
        };
        if let Some(spec) = &ds.splits {
            spec.validate(&ds)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.width()
    }

    pub fn granularity(&self) -> Granularity {
        self.attributes.granularity()
    }

    pub fn image(&self, i: usize) -> &RgbImage {
        &self.images[i]
    }

    pub fn image_id(&self, i: usize) -> &str {
        &self.image_ids[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn attribute_table(&self) -> &AttributeTable {
        &self.attributes
    }

    pub fn splits(&self) -> Option<&SplitSpec> {
        self.splits.as_ref()
    }

    pub fn class_index(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|c| *c == class_id)
    }

    /// Attribute annotations of image `i`; per-class rows are broadcast.
    pub fn attributes_of(&self, i: usize) -> &[u8] {
        match self.attributes.granularity() {
            Granularity::PerImage => self.attributes.row(i),
            Granularity::PerClass => self.attributes.row(self.labels[i]),
        }
    }

    /// Class-level annotation: the stored row for per-class data, otherwise
    /// the per-attribute majority over `members` (ties round to 1).
    pub fn class_attributes(&self, class: usize, members: &[usize]) -> Vec<u8> {
        match self.attributes.granularity() {
            Granularity::PerClass => self.attributes.row(class).to_vec(),
            Granularity::PerImage => {
                let a = self.num_attributes();
                let mut sums = vec![0usize; a];
                for &m in members {
                    for (s, v) in sums.iter_mut().zip(self.attributes.row(m)) {
                        *s += *v as usize;
                    }
                }
                let n = members.len().max(1);
                sums.into_iter().map(|s| u8::from(2 * s >= n)).collect()
            }
        }
    }

    pub fn images_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy that keeps only the listed attribute columns (in the given order).
    pub fn with_attributes(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Config("cannot drop every attribute".into()));
        }
        if let Some(bad) = keep.iter().find(|&&c| c >= self.num_attributes()) {
            return Err(Error::Config(format!("attribute {bad} out of range")));
        }
        let mut out = self.clone();
        out.attributes = self.attributes.select_columns(keep);
        out.attribute_names = keep
            .iter()
            .map(|&c| self.attribute_names[c].clone())
            .collect();
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Tiny per-class dataset: `classes` classes × `per_class` solid-color images.
    pub fn tiny(classes: usize, per_class: usize, attrs: usize) -> AttributeDataset {
        let mut images = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for j in 0..per_class {
                images.push(RgbImage::from_pixel(
                    8,
                    8,
                    image::Rgb([c as u8, j as u8, 0]),
                ));
                ids.push(format!("{c}_{j}.png"));
                labels.push(c);
            }
        }
        let values = (0..classes * attrs)
            .map(|i| ((i / attrs) >> (i % attrs) & 1) as u8)
            .collect();
        AttributeDataset::new(
            images,
            ids,
            labels,
            (0..classes as u32).collect(),
            (0..classes).map(|c| format!("class{c}")).collect(),
            (0..attrs).map(|a| format!("attr{a}")).collect(),
            AttributeTable::new(Granularity::PerClass, attrs, values).unwrap(),
            None,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn per_class_attributes_broadcast_to_images() {
        let ds = test_support::tiny(1, 4, 3);
        let first = ds.attributes_of(0).to_vec();
        for i in 1..4 {
            assert_eq!(ds.attributes_of(i), first.as_slice());
        }
    }

    #[test]
    fn continuous_votes_round_at_half() {
        assert_eq!(binarize(0.33), 0);
        assert_eq!(binarize(0.66), 1);
        assert_eq!(binarize(0.5), 1);
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(x in 0.0f64..=1.0) {
            let once = binarize(x);
            prop_assert_eq!(binarize(once as f64), once);
        }
    }

    #[test]
    fn rejects_non_binary_and_misshapen_tables() {
        assert!(AttributeTable::new(Granularity::PerImage, 2, vec![0, 2]).is_err());
        assert!(AttributeTable::new(Granularity::PerImage, 2, vec![0, 1, 1]).is_err());
        assert!(AttributeTable::new(Granularity::PerImage, 0, vec![]).is_err());
    }

    #[test]
    fn rejects_label_outside_classes() {
        let table = AttributeTable::new(Granularity::PerClass, 1, vec![1]).unwrap();
        let err = AttributeDataset::new(
            vec![RgbImage::new(2, 2)],
            vec!["a".into()],
            vec![3],
            vec![0],
            vec!["c".into()],
            vec!["x".into()],
            table,
            None,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn majority_annotation_for_per_image_data() {
        let table = AttributeTable::new(Granularity::PerImage, 2, vec![1, 0, 1, 1, 0, 1]).unwrap();
        let ds = AttributeDataset::new(
            vec![RgbImage::new(2, 2); 3],
            vec!["a".into(), "b".into(), "c".into()],
            vec![0, 0, 0],
            vec![7],
            vec!["c".into()],
            vec!["x".into(), "y".into()],
            table,
            None,
        )
        .unwrap();
        assert_eq!(ds.class_attributes(0, &[0, 1, 2]), vec![1, 1]);
        assert_eq!(ds.class_attributes(0, &[0, 2]), vec![1, 1]);
        assert_eq!(ds.class_index(7), Some(0));
    }

    #[test]
    fn attribute_subset_keeps_images() {
        let ds = test_support::tiny(4, 2, 3);
        let sub = ds.with_attributes(&[2, 0]).unwrap();
        assert_eq!(sub.num_attributes(), 2);
        assert_eq!(sub.len(), ds.len());
        for i in 0..ds.len() {
            assert_eq!(
                sub.attributes_of(i),
                &[ds.attributes_of(i)[2], ds.attributes_of(i)[0]]
            );
        }
        assert!(ds.with_attributes(&[]).is_err());
    }
}
