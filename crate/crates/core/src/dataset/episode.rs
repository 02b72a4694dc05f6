use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DatasetView;
use crate::error::{Error, Result};

/// One N-way K-shot task. Position `i` in `classes`, `support` and `query`
/// refers to the same class; labels inside the episode are those positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Dense dataset class indices, in sampling order.
    pub classes: Vec<usize>,
    /// `support[i]` holds K image indices of class `classes[i]`.
    pub support: Vec<Vec<usize>>,
    /// `query[i]` holds Q image indices of class `classes[i]`.
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn queries_per_class(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }

    /// Query image indices flattened class by class, with their episode labels.
    pub fn query_items(&self) -> Vec<(usize, usize)> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(label, imgs)| imgs.iter().map(move |&i| (i, label)))
            .collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query_items().into_iter().map(|(_, l)| l).collect()
    }
}

/// Episode shape: N ways, K shots and Q queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries: 16,
        }
    }
}

impl Protocol {
    pub fn sample<R: Rng + ?Sized>(&self, pool: &DatasetView, rng: &mut R) -> Result<Episode> {
        sample_episode(pool, self.ways, self.shots, self.queries, rng)
    }
}

/// Samples `n` classes uniformly without replacement, then `k + q` images per
/// class without replacement; the first `k` become support.
///
/// Every class of the pool must hold at least `k + q` images, so whether
/// sampling succeeds never depends on the generator state.
pub fn sample_episode<R: Rng + ?Sized>(
    pool: &DatasetView,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Sampling(format!(
            "N, K and Q must be positive (got {n}, {k}, {q})"
        )));
    }
    if pool.num_classes() < n {
        return Err(Error::Sampling(format!(
            "pool has {} classes, episode needs {n}",
            pool.num_classes()
        )));
    }
    for pos in 0..pool.num_classes() {
        let size = pool.members(pos).len();
        if size < k + q {
            let class = pool.classes()[pos];
            return Err(Error::Sampling(format!(
                "class {} ({}) has {size} images, K+Q = {}",
                pool.dataset().class_ids()[class],
                pool.dataset().class_names()[class],
                k + q
            )));
        }
    }
    let picked = index::sample(rng, pool.num_classes(), n).into_vec();
    let mut classes = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    for pos in picked {
        let members = pool.members(pos);
        let chosen: Vec<usize> = index::sample(rng, members.len(), k + q)
            .into_iter()
            .map(|i| members[i])
            .collect();
        classes.push(pool.classes()[pos]);
        support.push(chosen[..k].to_vec());
        query.push(chosen[k..].to_vec());
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}
