//! Prototype classifier in attribute space.
//!
//! Prototypes are per-class means of support vectors. A query's class
//! probabilities are a softmax over negative distances to the prototypes,
//! optionally after weighting every coordinate by a mask.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{Error, Result};

/// Floor applied inside the log of the episodic loss.
pub const LOSS_EPS: f64 = 1e-12;
const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Cosine,
}

impl Distance {
    fn eval(self, a: &[f64], b: &[f64], mask: Option<&[f64]>) -> f64 {
        let w = |i: usize| mask.map_or(1.0, |m| m[i]);
        match self {
            Distance::SquaredEuclidean => (0..a.len())
                .map(|i| (w(i) * a[i] - w(i) * b[i]).powi(2))
                .sum(),
            Distance::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for i in 0..a.len() {
                    let (x, y) = (w(i) * a[i], w(i) * b[i]);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                1.0 - dot / (na.sqrt() * nb.sqrt()).max(COSINE_EPS)
            }
        }
    }
}

/// Per-class means. `support[c]` holds the support vectors of class `c`.
pub fn compute_prototypes(support: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let dim = support.iter().flatten().next().map(Vec::len);
    support
        .iter()
        .enumerate()
        .map(|(c, vectors)| {
            if vectors.is_empty() {
                return Err(Error::Validation(format!(
                    "class {c} has no support vectors"
                )));
            }
            let dim = dim.expect("nonempty");
            let mut mean = vec![0.0; dim];
            for v in vectors {
                if v.len() != dim {
                    return Err(Error::Validation(format!(
                        "support vector of width {} in a {dim}-wide episode",
                        v.len()
                    )));
                }
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            let k = vectors.len() as f64;
            mean.iter_mut().for_each(|m| *m /= k);
            Ok(mean)
        })
        .collect()
}

/// An episode expressed in some feature space: prototypes, query rows and
/// the queries' episode labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFeatures {
    pub prototypes: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl EpisodeFeatures {
    /// `features[i]` is the feature row of dataset image `i`.
    pub fn gather(features: &[Vec<f64>], episode: &Episode) -> Result<Self> {
        let row = |i: usize| {
            features.get(i).cloned().ok_or_else(|| {
                Error::Validation(format!(
                    "no features for image {i} (table has {})",
                    features.len()
                ))
            })
        };
        let support = episode
            .support
            .iter()
            .map(|imgs| imgs.iter().map(|&i| row(i)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let items = episode.query_items();
        Ok(Self {
            prototypes: compute_prototypes(&support)?,
            queries: items.iter().map(|&(i, _)| row(i)).collect::<Result<_>>()?,
            labels: items.into_iter().map(|(_, l)| l).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Concatenates every row with the matching row of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.labels != other.labels || self.prototypes.len() != other.prototypes.len() {
            return Err(Error::Validation(
                "feature spaces describe different episodes".into(),
            ));
        }
        let join = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| [x.as_slice(), y].concat())
                .collect()
        };
        Ok(Self {
            prototypes: join(&self.prototypes, &other.prototypes),
            queries: join(&self.queries, &other.queries),
            labels: self.labels.clone(),
        })
    }

    pub fn classify(
        &self,
        mask: Option<&[f64]>,
        distance: Distance,
    ) -> Result<EpisodeProbabilities> {
        classify(&self.queries, &self.prototypes, mask, distance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeProbabilities {
    /// `probs[q][c]`: probability that query `q` belongs to episode class `c`.
    pub probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

impl EpisodeProbabilities {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let correct = self
            .predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / labels.len() as f64
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of `-distances`.
pub fn softmin(distances: &[f64]) -> Vec<f64> {
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|d| (lo - d).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn classify(
    queries: &[Vec<f64>],
    prototypes: &[Vec<f64>],
    mask: Option<&[f64]>,
    distance: Distance,
) -> Result<EpisodeProbabilities> {
    let dim = prototypes
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Validation("no prototypes".into()))?;
    if let Some(m) = mask {
        if m.len() != dim {
            return Err(Error::Validation(format!(
                "mask of width {} for {dim}-wide prototypes",
                m.len()
            )));
        }
        if m.iter().any(|w| *w < 0.0) {
            return Err(Error::Validation("mask weights must be nonnegative".into()));
        }
    }
    if let Some(p) = prototypes.iter().find(|p| p.len() != dim) {
        return Err(Error::Validation(format!(
            "prototype of width {} among {dim}-wide prototypes",
            p.len()
        )));
    }
    let mut probs = Vec::with_capacity(queries.len());
    let mut predictions = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        if q.len() != dim {
            return Err(Error::Validation(format!(
                "query {qi} has width {}, prototypes {dim}",
                q.len()
            )));
        }
        let d: Vec<f64> = prototypes
            .iter()
            .map(|p| distance.eval(q, p, mask))
            .collect();
        if d.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN distance for query {qi}")));
        }
        let row = softmin(&d);
        predictions.push(argmax(&row));
        probs.push(row);
    }
    Ok(EpisodeProbabilities { probs, predictions })
}

/// Summed negative log-likelihood of the true labels.
pub fn episode_loss(probs: &EpisodeProbabilities, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.probs.len() {
        return Err(Error::Validation(format!(
            "{} labels for {} queries",
            labels.len(),
            probs.probs.len()
        )));
    }
    let mut loss = 0.0;
    for (row, &y) in probs.probs.iter().zip(labels) {
        let p = row.get(y).ok_or_else(|| {
            Error::Validation(format!("label {y} outside the {}-way episode", row.len()))
        })?;
        loss -= p.max(LOSS_EPS).ln();
    }
    Ok(loss)
}

/// `(N, K, D)` support features → `(N, D)` prototypes.
pub fn prototypes_tensor(support: &Tensor) -> Result<Tensor> {
    Ok(support.mean(1)?)
}

/// `(M, D)` queries and `(N, D)` prototypes → `(M, N)` log-probabilities.
/// `mask`, when given, has shape `(D,)` and multiplies both sides.
pub fn log_probs_tensor(
    queries: &Tensor,
    prototypes: &Tensor,
    mask: Option<&Tensor>,
    distance: Distance,
) -> Result<Tensor> {
    let (q, p) = match mask {
        Some(m) => (queries.broadcast_mul(m)?, prototypes.broadcast_mul(m)?),
        None => (queries.clone(), prototypes.clone()),
    };
    let d = match distance {
        Distance::SquaredEuclidean => {
            let diff = q.unsqueeze(1)?.broadcast_sub(&p.unsqueeze(0)?)?;
            diff.sqr()?.sum(D::Minus1)?
        }
        Distance::Cosine => {
            let unit = |t: &Tensor| -> Result<Tensor> {
                let norm = t
                    .sqr()?
                    .sum_keepdim(D::Minus1)?
                    .sqrt()?
                    .clamp(COSINE_EPS.sqrt(), f64::MAX)?;
                Ok(t.broadcast_div(&norm)?)
            };
            (unit(&q)?.matmul(&unit(&p)?.t()?)?.neg()? + 1.0)?
        }
    };
    Ok(candle_nn::ops::log_softmax(&d.neg()?, D::Minus1)?)
}

/// Summed `-log max(p, ε)` of the true labels.
pub fn episode_loss_tensor(log_probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (m, n) = log_probs.dims2()?;
    if labels.len() != m {
        return Err(Error::Validation(format!(
            "{} labels for {m} queries",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Validation(format!(
            "label {y} outside the {n}-way episode"
        )));
    }
    let idx = Tensor::from_vec(
        labels.iter().map(|&y| y as u32).collect::<Vec<_>>(),
        (m, 1),
        log_probs.device(),
    )?;
    let picked = log_probs.gather(&idx, 1)?.maximum(LOSS_EPS.ln())?;
    Ok(picked.sum_all()?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    #[test]
    fn prototype_means() {
        let p = compute_prototypes(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.3, 0.7]]])
            .unwrap();
        assert_eq!(p, vec![vec![0.5, 0.5], vec![0.3, 0.7]]);
        assert!(compute_prototypes(&[vec![vec![1.0]], vec![]]).is_err());
    }

    #[test]
    fn hand_computed_two_class_case() {
        let r = classify(
            &[vec![1.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            None,
            Distance::SquaredEuclidean,
        )
        .unwrap();
        let oracle = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((r.probs[0][0] - oracle).abs() < 1e-12);
        assert!((r.probs[0][0] - 0.8808).abs() < 1e-4 && (r.probs[0][1] - 0.1192).abs() < 1e-4);
        assert_eq!(r.predictions, vec![0]);
    }

    #[test]
    fn equidistant_query_is_uniform_and_ties_go_low() {
        let protos = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
        ];
        let r = classify(&[vec![0.5, 0.5]], &protos, None, Distance::SquaredEuclidean).unwrap();
        assert!(r.probs[0].iter().all(|p| (p - 0.25).abs() < 1e-12));
        assert_eq!(r.predictions[0], 0);
    }

    #[test]
    fn masked_coordinate_is_ignored() {
        let protos = vec![vec![0.2, 0.4], vec![0.9, 0.1]];
        let mask = [1.0, 0.0];
        let a = classify(
            &[vec![0.3, 0.9]],
            &protos,
            Some(&mask),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        let b = classify(
            &[vec![0.3, 0.1]],
            &protos,
            Some(&mask),
            Distance::SquaredEuclidean,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_examples() {
        let half = EpisodeProbabilities {
            probs: vec![vec![0.5, 0.5]],
            predictions: vec![0],
        };
        assert!((episode_loss(&half, &[0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let uniform = EpisodeProbabilities {
            probs: vec![vec![0.2; 5]; 80],
            predictions: vec![0; 80],
        };
        let l = episode_loss(&uniform, &[0; 80]).unwrap();
        assert!((l - 80.0 * 5f64.ln()).abs() < 1e-9 && (l - 128.76).abs() < 5e-3);
        let sure = EpisodeProbabilities {
            probs: vec![vec![1.0, 0.0]],
            predictions: vec![0],
        };
        assert_eq!(episode_loss(&sure, &[0]).unwrap(), 0.0);
        assert!(episode_loss(&sure, &[2]).is_err());
    }

    #[test]
    fn errors() {
        assert!(classify(&[vec![1.0]], &[], None, Distance::SquaredEuclidean).is_err());
        assert!(classify(
            &[vec![1.0]],
            &[vec![1.0, 0.0]],
            None,
            Distance::SquaredEuclidean
        )
        .is_err());
        assert!(matches!(
            classify(
                &[vec![f64::NAN]],
                &[vec![0.0]],
                None,
                Distance::SquaredEuclidean
            ),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn tensor_path_matches_plain_path() {
        let dev = Device::Cpu;
        let queries = vec![vec![0.1, 0.8, 0.3], vec![0.9, 0.2, 0.5]];
        let protos = vec![
            vec![0.0, 1.0, 0.5],
            vec![1.0, 0.0, 0.4],
            vec![0.5, 0.5, 0.5],
        ];
        let mask = vec![1.0, 0.0, 0.7];
        let qt = Tensor::new(queries.clone(), &dev).unwrap();
        let pt = Tensor::new(protos.clone(), &dev).unwrap();
        let mt = Tensor::new(mask.as_slice(), &dev).unwrap();
        for dist in [Distance::SquaredEuclidean, Distance::Cosine] {
            let plain = classify(&queries, &protos, Some(&mask), dist).unwrap();
            let lp = log_probs_tensor(&qt, &pt, Some(&mt), dist).unwrap();
            let rows = lp.exp().unwrap().to_vec2::<f64>().unwrap();
            for (a, b) in rows.iter().flatten().zip(plain.probs.iter().flatten()) {
                assert!((a - b).abs() < 1e-12, "{dist:?}: {a} vs {b}");
            }
            let lt = episode_loss_tensor(&lp, &[1, 0])
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!((lt - episode_loss(&plain, &[1, 0]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let queries = vec![vec![0.1, 0.8], vec![0.6, 0.3], vec![0.4, 0.4]];
        let protos = vec![vec![0.0, 1.0], vec![1.0, 0.2]];
        let labels = [0, 1, 1];
        let qv = Var::from_tensor(&Tensor::new(queries.clone(), &dev).unwrap()).unwrap();
        let pt = Tensor::new(protos.clone(), &dev).unwrap();
        let loss = episode_loss_tensor(
            &log_probs_tensor(qv.as_tensor(), &pt, None, Distance::SquaredEuclidean).unwrap(),
            &labels,
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&qv).unwrap().to_vec2::<f64>().unwrap();
        let f = |q: &Vec<Vec<f64>>| {
            episode_loss(
                &classify(q, &protos, None, Distance::SquaredEuclidean).unwrap(),
                &labels,
            )
            .unwrap()
        };
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut up = queries.clone();
                up[i][j] += h;
                let mut down = queries.clone();
                down[i][j] -= h;
                let fd = (f(&up) - f(&down)) / (2.0 * h);
                assert!(
                    (fd - g[i][j]).abs() / fd.abs().max(1e-8) < 1e-5,
                    "{fd} vs {}",
                    g[i][j]
                );
            }
        }
        assert_eq!(qv.dtype(), DType::F64);
    }

    fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n)
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(q in vectors(4, 5), p in vectors(3, 5), cosine in any::<bool>()) {
            let dist = if cosine { Distance::Cosine } else { Distance::SquaredEuclidean };
            let r = classify(&q, &p, None, dist).unwrap();
            for row in &r.probs {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }

        #[test]
        fn prototype_permutation_permutes_columns(q in vectors(3, 4), p in vectors(4, 4), rot in 0usize..4) {
            let mut rotated = p.clone();
            rotated.rotate_left(rot);
            let a = classify(&q, &p, None, Distance::SquaredEuclidean).unwrap();
            let b = classify(&q, &rotated, None, Distance::SquaredEuclidean).unwrap();
            for (ra, rb) in a.probs.iter().zip(&b.probs) {
                for c in 0..4 {
                    prop_assert!((ra[(c + rot) % 4] - rb[c]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn shift_invariance(d in prop::collection::vec(0.0f64..10.0, 2..8), shift in -50.0f64..50.0) {
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            for (a, b) in softmin(&d).iter().zip(softmin(&shifted)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn prototypes_ignore_support_order(s in vectors(5, 3)) {
            let mut rev = s.clone();
            rev.reverse();
            let a = compute_prototypes(&[s]).unwrap();
            let b = compute_prototypes(&[rev]).unwrap();
            for (x, y) in a[0].iter().zip(&b[0]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
