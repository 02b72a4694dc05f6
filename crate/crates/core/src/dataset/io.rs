//! On-disk dataset layout.
//!
//! ```text
//! <root>/
//!   images/          image files named by image id
//!   labels.csv       image_id,class_id
//!   attributes.csv   class_id|image_id,<attribute names...>
//!   splits.json      {"base":[...],"val":[...],"novel":[...]}   (optional)
//!   classes.csv      class_id,class_name                          (optional)
//! ```
//!
//! Attribute values may be continuous in `[0, 1]`; they are rounded at 0.5.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageFormat, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use super::{binarize, AttributeDataset, AttributeTable, Granularity, SplitSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// The directory layout documented at module level.
    #[default]
    CsvDirectory,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv-directory" | "csv-dir" => Ok(Self::CsvDirectory),
            other => Err(Error::Config(format!(
                "unknown dataset format '{other}' (expected csv-directory)"
            ))),
        }
    }
}

const LABELS: &str = "labels.csv";
const ATTRIBUTES: &str = "attributes.csv";
const SPLITS: &str = "splits.json";
const CLASSES: &str = "classes.csv";
const IMAGES: &str = "images";

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::ingestion(&path, "file not found"))
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingestion(path, e.to_string()))
}

fn parse_class_id(path: &Path, row: usize, field: &str) -> Result<u32> {
    field.parse().map_err(|_| {
        Error::Validation(format!(
            "{}: row {row}: bad class id '{field}'",
            path.display()
        ))
    })
}

pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<AttributeDataset> {
    let DatasetFormat::CsvDirectory = format;
    if !root.is_dir() {
        return Err(Error::ingestion(root, "dataset directory not found"));
    }

    let labels_path = require(root.join(LABELS))?;
    let mut image_ids = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, rec) in reader(&labels_path)?.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Validation(format!(
                "{LABELS}: row {row}: expected image_id,class_id"
            )));
        }
        image_ids.push(rec[0].to_string());
        raw_labels.push(parse_class_id(&labels_path, row, &rec[1])?);
    }

    let attr_path = require(root.join(ATTRIBUTES))?;
    let mut attr_reader = reader(&attr_path)?;
    let header = attr_reader.headers()?.clone();
    let granularity = match header.get(0) {
        Some("class_id") => Granularity::PerClass,
        Some("image_id") => Granularity::PerImage,
        other => {
            return Err(Error::Validation(format!(
                "{ATTRIBUTES}: first column must be class_id or image_id, found {other:?}"
            )))
        }
    };
    let attribute_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let width = attribute_names.len();
    let mut attr_rows: Vec<(String, Vec<u8>)> = Vec::new();
    for (row, rec) in attr_reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != width + 1 {
            return Err(Error::Validation(format!(
                "{ATTRIBUTES}: row {row} has {} values, header names {width}",
                rec.len() - 1
            )));
        }
        let mut values = Vec::with_capacity(width);
        for col in 0..width {
            let v: f64 = rec[col + 1].parse().map_err(|_| {
                Error::Validation(format!(
                    "{ATTRIBUTES}: row {row} column {col}: not a number '{}'",
                    &rec[col + 1]
                ))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{ATTRIBUTES}: row {row} column {col}: value {v} outside [0, 1]"
                )));
            }
            values.push(binarize(v));
        }
        attr_rows.push((rec[0].to_string(), values));
    }

    let mut class_set: BTreeSet<u32> = raw_labels.iter().copied().collect();
    if granularity == Granularity::PerClass {
        for (row, (key, _)) in attr_rows.iter().enumerate() {
            class_set.insert(parse_class_id(&attr_path, row, key)?);
        }
    }
    let class_ids: Vec<u32> = class_set.into_iter().collect();
    let dense: HashMap<u32, usize> = class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|c| dense[c]).collect();

    let values = match granularity {
        Granularity::PerClass => {
            let mut by_class: HashMap<u32, Vec<u8>> = HashMap::new();
            for (row, (key, vals)) in attr_rows.into_iter().enumerate() {
                let id = parse_class_id(&attr_path, row, &key)?;
                if by_class.insert(id, vals).is_some() {
                    return Err(Error::Validation(format!(
                        "{ATTRIBUTES}: class {id} listed twice"
                    )));
                }
            }
            let mut out = Vec::with_capacity(class_ids.len() * width);
            for id in &class_ids {
                let row = by_class.get(id).ok_or_else(|| {
                    Error::Validation(format!("{ATTRIBUTES}: no attribute row for class {id}"))
                })?;
                out.extend_from_slice(row);
            }
            out
        }
        Granularity::PerImage => {
            if attr_rows.len() != image_ids.len() {
                return Err(Error::Validation(format!(
                    "{ATTRIBUTES} has {} image rows, {LABELS} has {} images",
                    attr_rows.len(),
                    image_ids.len()
                )));
            }
            let mut by_image: HashMap<String, Vec<u8>> = attr_rows.into_iter().collect();
            let mut out = Vec::with_capacity(image_ids.len() * width);
            for id in &image_ids {
                let row = by_image.remove(id).ok_or_else(|| {
                    Error::Validation(format!("{ATTRIBUTES}: no attribute row for image {id}"))
                })?;
                out.extend_from_slice(&row);
            }
            out
        }
    };
    let attributes = AttributeTable::new(granularity, width, values)?;

    let mut class_names: Vec<String> = class_ids.iter().map(|c| c.to_string()).collect();
    let classes_path = root.join(CLASSES);
    if classes_path.exists() {
        for (row, rec) in reader(&classes_path)?.records().enumerate() {
            let rec = rec?;
            let id = parse_class_id(&classes_path, row, &rec[0])?;
            if let (Some(&i), Some(name)) = (dense.get(&id), rec.get(1)) {
                class_names[i] = name.to_string();
            }
        }
    }

    let splits_path = root.join(SPLITS);
    let splits = if splits_path.exists() {
        let text = fs::read_to_string(&splits_path)?;
        Some(
            serde_json::from_str::<SplitSpec>(&text)
                .map_err(|e| Error::ingestion(&splits_path, e.to_string()))?,
        )
    } else {
        None
    };

    let image_dir = require(root.join(IMAGES))?;
    let images = image_ids
        .iter()
        .map(|id| read_image(&image_dir.join(id)))
        .collect::<Result<Vec<RgbImage>>>()?;

    AttributeDataset::new(
        images,
        image_ids,
        labels,
        class_ids,
        class_names,
        attribute_names,
        attributes,
        splits,
    )
}

fn read_image(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::ingestion(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| Error::ingestion(path, e.to_string()))?;
    Ok(reader
        .decode()
        .map_err(|e| Error::ingestion(path, e.to_string()))?
        .to_rgb8())
}

/// Writes `dataset` in the csv-directory layout. Images are PNG-encoded.
pub fn save_dataset(dataset: &AttributeDataset, root: &Path) -> Result<()> {
    let image_dir = root.join(IMAGES);
    fs::create_dir_all(&image_dir)?;
    for i in 0..dataset.len() {
        dataset
            .image(i)
            .save_with_format(image_dir.join(dataset.image_id(i)), ImageFormat::Png)?;
    }

    let mut labels = csv::Writer::from_path(root.join(LABELS))?;
    labels.write_record(["image_id", "class_id"])?;
    for i in 0..dataset.len() {
        labels.write_record([
            dataset.image_id(i).to_string(),
            dataset.class_ids()[dataset.label(i)].to_string(),
        ])?;
    }
    labels.flush()?;

    let mut attrs = csv::Writer::from_path(root.join(ATTRIBUTES))?;
    let table = dataset.attribute_table();
    let key = match table.granularity() {
        Granularity::PerClass => "class_id",
        Granularity::PerImage => "image_id",
    };
    attrs.write_record(
        std::iter::once(key).chain(dataset.attribute_names().iter().map(String::as_str)),
    )?;
    for r in 0..table.rows() {
        let id = match table.granularity() {
            Granularity::PerClass => dataset.class_ids()[r].to_string(),
            Granularity::PerImage => dataset.image_id(r).to_string(),
        };
        attrs.write_record(std::iter::once(id).chain(table.row(r).iter().map(u8::to_string)))?;
    }
    attrs.flush()?;

    let mut classes = csv::Writer::from_path(root.join(CLASSES))?;
    classes.write_record(["class_id", "class_name"])?;
    for (id, name) in dataset.class_ids().iter().zip(dataset.class_names()) {
        classes.write_record([id.to_string(), name.clone()])?;
    }
    classes.flush()?;

    if let Some(spec) = dataset.splits() {
        fs::write(root.join(SPLITS), serde_json::to_string_pretty(spec)?)?;
    }
    Ok(())
}
