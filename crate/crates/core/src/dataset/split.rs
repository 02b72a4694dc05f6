use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::AttributeDataset;
use crate::error::{Error, Result};

/// Disjoint base / validation / novel class pools, by external class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base: Vec<u32>,
    #[serde(rename = "val")]
    pub validation: Vec<u32>,
    pub novel: Vec<u32>,
}

impl SplitSpec {
    /// Consecutive dense ranges: the first `base` classes, then `validation`, then `novel`.
    pub fn consecutive(
        class_ids: &[u32],
        base: usize,
        validation: usize,
        novel: usize,
    ) -> Result<Self> {
        if base + validation + novel > class_ids.len() {
            return Err(Error::Split(format!(
                "{base}+{validation}+{novel} classes requested from {}",
                class_ids.len()
            )));
        }
        Ok(Self {
            base: class_ids[..base].to_vec(),
            validation: class_ids[base..base + validation].to_vec(),
            novel: class_ids[base + validation..base + validation + novel].to_vec(),
        })
    }

    pub fn validate(&self, dataset: &AttributeDataset) -> Result<()> {
        let pools = [
            ("base", &self.base),
            ("val", &self.validation),
            ("novel", &self.novel),
        ];
        let mut seen: HashSet<u32> = HashSet::new();
        for (name, pool) in pools {
            if pool.is_empty() {
                return Err(Error::Split(format!("{name} pool is empty")));
            }
            for id in pool {
                if dataset.class_index(*id).is_none() {
                    return Err(Error::Split(format!(
                        "{name} pool lists unknown class {id}"
                    )));
                }
                if !seen.insert(*id) {
                    return Err(Error::Split(format!(
                        "class {id} appears in more than one pool"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A class pool over a shared dataset.
#[derive(Debug, Clone)]
pub struct DatasetView {
    dataset: Arc<AttributeDataset>,
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl DatasetView {
    pub fn new(dataset: Arc<AttributeDataset>, classes: Vec<usize>) -> Self {
        let mut members = vec![Vec::new(); classes.len()];
        let position: std::collections::HashMap<usize, usize> =
            classes.iter().enumerate().map(|(p, c)| (*c, p)).collect();
        for (i, label) in dataset.labels().iter().enumerate() {
            if let Some(&p) = position.get(label) {
                members[p].push(i);
            }
        }
        Self {
            dataset,
            classes,
            members,
        }
    }

    /// View over every class of the dataset.
    pub fn all(dataset: Arc<AttributeDataset>) -> Self {
        let classes = (0..dataset.num_classes()).collect();
        Self::new(dataset, classes)
    }

    pub fn dataset(&self) -> &Arc<AttributeDataset> {
        &self.dataset
    }

    /// Dense class indices in this pool.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Image indices of the `pos`-th class of the pool.
    pub fn members(&self, pos: usize) -> &[usize] {
        &self.members[pos]
    }

    pub fn image_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.members.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub base: DatasetView,
    pub validation: DatasetView,
    pub novel: DatasetView,
}

impl Splits {
    pub fn by_name(&self, name: &str) -> Option<&DatasetView> {
        match name {
            "base" | "train" => Some(&self.base),
            "val" | "validation" => Some(&self.validation),
            "novel" | "test" => Some(&self.novel),
            _ => None,
        }
    }
}

pub fn split_dataset(dataset: &Arc<AttributeDataset>, spec: &SplitSpec) -> Result<Splits> {
    spec.validate(dataset)?;
    let dense = |ids: &[u32]| {
        ids.iter()
            .map(|id| dataset.class_index(*id).expect("validated"))
            .collect()
    };
    Ok(Splits {
        base: DatasetView::new(dataset.clone(), dense(&spec.base)),
        validation: DatasetView::new(dataset.clone(), dense(&spec.validation)),
        novel: DatasetView::new(dataset.clone(), dense(&spec.novel)),
    })
}
