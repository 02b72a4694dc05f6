//! Human-friendly attribute predictor: sample-weighted BCE training and
//! attribute-accuracy metrics.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar};
use crate::dataset::preprocess::PreparedImages;
use crate::dataset::{Augmentation, DatasetView, ImageTransform};
use crate::error::{Error, Result};
use crate::nn::{adam, AttributeNet, BackboneConfig, ParamStore};

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

fn check_binary(a: &[u8]) -> Result<()> {
    match a.iter().position(|v| *v > 1) {
        Some(j) => Err(Error::Validation(format!(
            "attribute {j} has non-binary value {}",
            a[j]
        ))),
        None => Ok(()),
    }
}

/// `w_j = 1 / |{k : a_k = a_j}|`.
pub fn sample_weights(a: &[u8]) -> Result<Vec<f64>> {
    check_binary(a)?;
    let present = a.iter().filter(|v| **v == 1).count();
    let absent = a.len() - present;
    Ok(a.iter()
        .map(|v| 1.0 / if *v == 1 { present } else { absent } as f64)
        .collect())
}

pub fn weighted_bce(a_hat: &[f64], a: &[u8]) -> Result<f64> {
    if a_hat.len() != a.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} attributes",
            a_hat.len(),
            a.len()
        )));
    }
    let w = sample_weights(a)?;
    Ok(a_hat
        .iter()
        .zip(a)
        .zip(&w)
        .map(|((p, t), w)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -w * if *t == 1 { p.ln() } else { (1.0 - p).ln() }
        })
        .sum())
}

/// Sum of [`weighted_bce`] over samples.
pub fn weighted_bce_batch(a_hat: &[Vec<f64>], a: &[Vec<u8>]) -> Result<f64> {
    if a_hat.len() != a.len() {
        return Err(Error::Validation(format!(
            "{} prediction rows for {} target rows",
            a_hat.len(),
            a.len()
        )));
    }
    a_hat.iter().zip(a).map(|(p, t)| weighted_bce(p, t)).sum()
}

/// Targets and per-sample weights as `(B, A)` tensors.
pub fn bce_targets(rows: &[&[u8]], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let width = rows.first().map_or(0, |r| r.len());
    let mut targets = Vec::with_capacity(rows.len() * width);
    let mut weights = Vec::with_capacity(rows.len() * width);
    for row in rows {
        targets.extend(row.iter().map(|v| *v as f64));
        weights.extend(sample_weights(row)?);
    }
    let shape = (rows.len(), width);
    Ok((
        Tensor::from_vec(targets, shape, device)?.to_dtype(dtype)?,
        Tensor::from_vec(weights, shape, device)?.to_dtype(dtype)?,
    ))
}

/// Graph version of [`weighted_bce_batch`] over `(B, A)` tensors.
pub fn weighted_bce_tensor(a_hat: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if a_hat.dims() != targets.dims() || a_hat.dims() != weights.dims() {
        return Err(Error::Validation(format!(
            "shape mismatch: predictions {:?}, targets {:?}, weights {:?}",
            a_hat.dims(),
            targets.dims(),
            weights.dims()
        )));
    }
    let p = a_hat.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (targets * p.log()?)?;
    let neg = ((1.0 - targets)? * (1.0 - &p)?.log()?)?;
    Ok(((pos + neg)? * weights)?.sum_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Percentages over samples: absent (AB), present (PR) and overall (OV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub absent: MeanStd,
    pub present: MeanStd,
    pub overall: MeanStd,
}

/// Per-sample `(present, absent, overall)` accuracy in percent. A side with
/// no attributes yields `None`.
pub fn sample_accuracy(pred: &[f64], truth: &[u8]) -> (Option<f64>, Option<f64>, f64) {
    let (mut tp, mut np, mut ta, mut na) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let hit = crate::dataset::binarize(*p) == *t;
        if *t == 1 {
            np += 1;
            tp += hit as usize;
        } else {
            na += 1;
            ta += hit as usize;
        }
    }
    let pct = |a: usize, b: usize| (b > 0).then(|| 100.0 * a as f64 / b as f64);
    (
        pct(tp, np),
        pct(ta, na),
        100.0 * (tp + ta) as f64 / truth.len() as f64,
    )
}

pub fn attribute_accuracy(preds: &[Vec<f64>], truth: &[&[u8]]) -> Result<AttributeAccuracy> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::Validation(format!(
            "{} prediction rows for {} truth rows",
            preds.len(),
            truth.len()
        )));
    }
    let (mut pr, mut ab, mut ov) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (p, t)) in preds.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Validation(format!(
                "row {i}: {} predictions for {} attributes",
                p.len(),
                t.len()
            )));
        }
        let (present, absent, overall) = sample_accuracy(p, t);
        pr.extend(present);
        ab.extend(absent);
        ov.push(overall);
    }
    let nan = MeanStd {
        mean: f64::NAN,
        std: f64::NAN,
    };
    Ok(AttributeAccuracy {
        absent: MeanStd::of(&ab).unwrap_or(nan),
        present: MeanStd::of(&pr).unwrap_or(nan),
        overall: MeanStd::of(&ov).expect("nonempty"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub num_attributes: usize,
    pub hidden_channels: usize,
    pub blocks: usize,
    pub image_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: Option<Augmentation>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            num_attributes: 0,
            hidden_channels: 64,
            blocks: 4,
            image_size: 84,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 128,
            augmentation: Some(Augmentation::default()),
        }
    }
}

impl PredictorConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            hidden_channels: self.hidden_channels,
            out_dim: self.num_attributes,
            blocks: self.blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_attributes == 0 {
            return Err(Error::Config("num_attributes must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "epochs, batch_size and learning_rate must be positive".into(),
            ));
        }
        if self.image_size < self.backbone().min_input_side() {
            return Err(Error::Config(format!(
                "image_size {} too small for {} blocks",
                self.image_size, self.blocks
            )));
        }
        self.backbone().validate()
    }
}

/// An image → `[0, 1]^A` network bundled with its input transform.
pub struct AttributePredictor {
    config: PredictorConfig,
    transform: ImageTransform,
    store: ParamStore,
    net: AttributeNet,
}

pub const PREDICTOR_KIND: &str = "attribute-predictor";
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictorMeta {
    transform: ImageTransform,
    #[serde(default)]
    extra: serde_json::Value,
}

impl AttributePredictor {
    pub fn new(config: PredictorConfig, transform: ImageTransform, seed: u64) -> Result<Self> {
        config.validate()?;
        if transform.size != config.image_size {
            return Err(Error::Config(format!(
                "transform size {} differs from image_size {}",
                transform.size, config.image_size
            )));
        }
        let store = ParamStore::new(seed, DType::F32);
        let net = AttributeNet::new(&config.backbone(), &store, "net")?;
        Ok(Self {
            config,
            transform,
            store,
            net,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn transform(&self) -> &ImageTransform {
        &self.transform
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn net(&self) -> &AttributeNet {
        &self.net
    }

    pub fn num_attributes(&self) -> usize {
        self.config.num_attributes
    }

    /// Evaluation-mode predictions for already-transformed `(B, 3, S, S)` input.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (_, _, h, w) = batch.dims4()?;
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Validation(format!(
                "input is {h}x{w}, predictor expects {0}x{0}",
                self.config.image_size
            )));
        }
        Ok(self
            .net
            .predict(batch, EVAL_CHUNK)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?)
    }

    /// Evaluation-mode predictions for the listed prepared images.
    pub fn predict(&self, images: &PreparedImages, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let batch = self.transform.batch::<ChaCha8Rng>(images, chunk, None)?;
            out.extend(self.predict_batch(&batch)?);
        }
        Ok(out)
    }

    /// Predictions for every prepared image, indexed like the dataset.
    pub fn predict_all(&self, images: &PreparedImages) -> Result<Vec<Vec<f64>>> {
        let all: Vec<usize> = (0..images.len()).collect();
        self.predict(images, &all)
    }

    pub fn sidecar(&self, kind: &str, seed: u64, metadata: serde_json::Value) -> Result<Sidecar> {
        let mut side = Sidecar::new(kind, &self.config, seed, &self.store)?;
        side.metadata = serde_json::to_value(PredictorMeta {
            transform: self.transform.clone(),
            extra: metadata,
        })?;
        Ok(side)
    }

    pub fn save(&self, stem: &Path, sidecar: &Sidecar) -> Result<()> {
        checkpoint::write(stem, &self.store, sidecar)
    }

    /// Restores a predictor saved under `kind`; returns it with its sidecar.
    pub fn load(stem: &Path, kind: &str) -> Result<(Self, Sidecar)> {
        let side = checkpoint::read_sidecar(stem, kind)?;
        let config: PredictorConfig = side.config_as()?;
        let meta: PredictorMeta = side.metadata_as()?;
        let mut model = Self::new(config, meta.transform, side.seed)?;
        checkpoint::load_weights(stem, &mut model.store, &side)?;
        Ok((model, side))
    }

    /// The `extra` metadata stored by [`AttributePredictor::sidecar`].
    pub fn extra_metadata(side: &Sidecar) -> Result<serde_json::Value> {
        Ok(side.metadata_as::<PredictorMeta>()?.extra)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample weighted BCE over the epoch.
    pub train_loss: f64,
    pub validation: AttributeAccuracy,
}

pub struct PredictorRun {
    pub predictor: AttributePredictor,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl PredictorRun {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Minimizes the weighted BCE over base images, validates attribute accuracy
/// after every epoch and keeps the weights with the best validation OV.
///
/// `images` must be prepared from the views' dataset at `config.image_size`.
pub fn train_attribute_predictor(
    base: &DatasetView,
    val: &DatasetView,
    images: &PreparedImages,
    config: &PredictorConfig,
    seed: u64,
) -> Result<PredictorRun> {
    if base.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "attribute predictor needs nonempty base and validation splits".into(),
        ));
    }
    let dataset = base.dataset();
    if config.num_attributes != dataset.num_attributes() {
        return Err(Error::Config(format!(
            "config has {} attributes, dataset {}",
            config.num_attributes,
            dataset.num_attributes()
        )));
    }
    if images.len() != dataset.len() || images.size() != config.image_size {
        return Err(Error::Config(
            "prepared images do not match the dataset and image_size".into(),
        ));
    }

    let mut train_idx = base.image_indices();
    let val_idx = val.image_indices();
    let transform = ImageTransform::fit(images, &train_idx)?;
    let predictor = AttributePredictor::new(config.clone(), transform, seed)?;
    let mut opt = adam(&predictor.store, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let val_truth: Vec<&[u8]> = val_idx.iter().map(|&i| dataset.attributes_of(i)).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, _)> = None;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let aug = config.augmentation.as_ref().map(|a| (a, &mut rng));
            let batch = predictor.transform.batch(images, chunk, aug)?;
            let rows: Vec<&[u8]> = chunk.iter().map(|&i| dataset.attributes_of(i)).collect();
            let (targets, weights) = bce_targets(&rows, DType::F32, &Device::Cpu)?;
            let out = predictor.net.forward(&batch, true)?;
            let loss = weighted_bce_tensor(&out, &targets, &weights)?;
            total += loss.to_scalar::<f32>()? as f64;
            opt.backward_step(&(loss / chunk.len() as f64)?)?;
        }
        let preds = predictor.predict(images, &val_idx)?;
        let validation = attribute_accuracy(&preds, &val_truth)?;
        let train_loss = total / train_idx.len() as f64;
        log::info!(
            "f_h epoch {epoch}: loss {train_loss:.4}, val OV {:.2}% (PR {:.2}%, AB {:.2}%)",
            validation.overall.mean,
            validation.present.mean,
            validation.absent.mean
        );
        if best
            .as_ref()
            .is_none_or(|(ov, _, _)| validation.overall.mean > *ov)
        {
            best = Some((validation.overall.mean, epoch, predictor.store.snapshot()?));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation,
        });
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch");
    predictor.store.restore(&snapshot)?;
    Ok(PredictorRun {
        predictor,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_dataset, SyntheticSpec};
    use candle_core::Var;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn weight_examples() {
        let close = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(
            sample_weights(&[1, 0, 0, 0]).unwrap(),
            &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        ));
        assert!(close(sample_weights(&[1, 1, 0, 0]).unwrap(), &[0.5; 4]));
        assert!(close(sample_weights(&[1, 1, 1]).unwrap(), &[1.0 / 3.0; 3]));
        assert!(sample_weights(&[1, 2]).is_err());
    }

    #[test]
    fn bce_examples() {
        // oracle: present term ln 0.8 plus three absent terms of ln 0.8 weighted 1/3
        let oracle = -(0.8f64.ln() + 3.0 * (1.0 / 3.0) * 0.8f64.ln());
        let got = weighted_bce(&[0.8, 0.2, 0.2, 0.2], &[1, 0, 0, 0]).unwrap();
        assert!((got - oracle).abs() < 1e-12 && (got - 0.4463).abs() < 1e-4);
        let got = weighted_bce(&[0.5, 0.5], &[1, 0]).unwrap();
        assert!((got - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(weighted_bce(&[1.0, 0.0, 0.0, 0.0], &[1, 0, 0, 0]).unwrap() < 1e-5);
        assert!(weighted_bce(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let acc = attribute_accuracy(&[vec![0.9, 0.4, 0.6]], &[&[1, 0, 0]]).unwrap();
        assert_eq!(acc.present.mean, 100.0);
        assert_eq!(acc.absent.mean, 50.0);
        assert!((acc.overall.mean - 200.0 / 3.0).abs() < 1e-12);
        let perfect =
            attribute_accuracy(&[vec![1.0, 0.0], vec![0.5, 0.2]], &[&[1, 0], &[1, 0]]).unwrap();
        assert_eq!(
            (
                perfect.present.mean,
                perfect.absent.mean,
                perfect.overall.mean
            ),
            (100.0, 100.0, 100.0)
        );
        assert_eq!(perfect.overall.std, 0.0);
        assert!(attribute_accuracy(&[vec![0.1]], &[&[1, 0]]).is_err());
    }

    #[test]
    fn tensor_bce_matches_plain_and_its_gradient() {
        let preds = vec![vec![0.7, 0.2, 0.4], vec![0.1, 0.95, 0.5]];
        let truth: Vec<Vec<u8>> = vec![vec![1, 0, 0], vec![0, 1, 1]];
        let rows: Vec<&[u8]> = truth.iter().map(Vec::as_slice).collect();
        let (t, w) = bce_targets(&rows, DType::F64, &Device::Cpu).unwrap();
        let v = Var::from_tensor(&Tensor::new(preds.clone(), &Device::Cpu).unwrap()).unwrap();
        let loss = weighted_bce_tensor(v.as_tensor(), &t, &w).unwrap();
        let plain = weighted_bce_batch(&preds, &truth).unwrap();
        assert!((loss.to_scalar::<f64>().unwrap() - plain).abs() < 1e-12);
        let g = loss
            .backward()
            .unwrap()
            .get(&v)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let (mut up, mut down) = (preds.clone(), preds.clone());
                up[i][j] += h;
                down[i][j] -= h;
                let fd = (weighted_bce_batch(&up, &truth).unwrap()
                    - weighted_bce_batch(&down, &truth).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i][j]).abs() / fd.abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_per_side(a in prop::collection::vec(0u8..2, 2..40)) {
            let w = sample_weights(&a).unwrap();
            let present: f64 = w.iter().zip(&a).filter(|(_, t)| **t == 1).map(|(w, _)| w).sum();
            let absent: f64 = w.iter().zip(&a).filter(|(_, t)| **t == 0).map(|(w, _)| w).sum();
            let expected = if a.contains(&0) && a.contains(&1) { 2.0 } else { 1.0 };
            prop_assert!((present + absent - expected).abs() < 1e-12);
        }

        #[test]
        fn bce_decreases_toward_target(a in prop::collection::vec(0u8..2, 1..10), p in prop::collection::vec(0.05f64..0.95, 10), j in 0usize..10) {
            let p = &p[..a.len()];
            let j = j % a.len();
            let base = weighted_bce(p, &a).unwrap();
            prop_assert!(base >= 0.0);
            let mut moved = p.to_vec();
            moved[j] += if a[j] == 1 { 0.01 } else { -0.01 };
            prop_assert!(weighted_bce(&moved, &a).unwrap() < base);
        }

        #[test]
        fn overall_is_weighted_mix(pred in prop::collection::vec(0.0f64..1.0, 6), truth in prop::collection::vec(0u8..2, 6)) {
            let (pr, ab, ov) = sample_accuracy(&pred, &truth);
            let np = truth.iter().filter(|t| **t == 1).count() as f64;
            let na = 6.0 - np;
            let mix = pr.unwrap_or(0.0) * np + ab.unwrap_or(0.0) * na;
            prop_assert!((ov * 6.0 - mix).abs() < 1e-9);
        }
    }

    #[test]
    fn short_training_run_is_reproducible_and_keeps_best_epoch() {
        let spec = SyntheticSpec::new(8, 6, 6, 0.1, 3)
            .with_image_size(24)
            .with_split(4, 2, 2);
        let ds = Arc::new(generate_synthetic(&spec).unwrap());
        let splits = split_dataset(&ds, ds.splits().unwrap()).unwrap();
        let images = PreparedImages::new(&ds, 16);
        let config = PredictorConfig {
            num_attributes: 6,
            hidden_channels: 4,
            image_size: 16,
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let a = train_attribute_predictor(&splits.base, &splits.validation, &images, &config, 11)
            .unwrap();
        let b = train_attribute_predictor(&splits.base, &splits.validation, &images, &config, 11)
            .unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
        assert!(a.best().validation.overall.mean >= a.history[0].validation.overall.mean);
        let preds = a.predictor.predict(&images, &[0, 1]).unwrap();
        assert!(preds.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(preds, a.predictor.predict(&images, &[0, 1]).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("fh");
        let side = a
            .predictor
            .sidecar(
                PREDICTOR_KIND,
                11,
                serde_json::json!({"epoch": a.best_epoch}),
            )
            .unwrap();
        a.predictor.save(&stem, &side).unwrap();
        let (back, side_back) = AttributePredictor::load(&stem, PREDICTOR_KIND).unwrap();
        assert_eq!(back.predict(&images, &[0, 1]).unwrap(), preds);
        assert_eq!(
            AttributePredictor::extra_metadata(&side_back).unwrap()["epoch"],
            a.best_epoch
        );

        let wrong = PreparedImages::new(&ds, 32);
        let batch = back.transform().batch::<ChaCha8Rng>(&wrong, &[0], None);
        assert!(batch.is_err());
        let big = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            back.predict_batch(&big),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn empty_split_is_a_config_error() {
        let ds = Arc::new(
            generate_synthetic(&SyntheticSpec::new(4, 3, 2, 0.0, 0).with_image_size(16)).unwrap(),
        );
        let empty = DatasetView::new(ds.clone(), vec![]);
        let full = DatasetView::all(ds.clone());
        let images = PreparedImages::new(&ds, 16);
        let config = PredictorConfig {
            num_attributes: 3,
            image_size: 16,
            ..Default::default()
        };
        assert!(matches!(
            train_attribute_predictor(&empty, &full, &images, &config, 0),
            Err(Error::Config(_))
        ));
    }
}
