//! Seeded parameter storage.
//!
//! Candle's own initializers draw from a thread-local generator, which makes
//! two runs with the same seed diverge. `ParamStore` wraps a [`VarMap`] and
//! fills every new variable from a ChaCha stream instead, so model
//! construction order plus seed fully determines the initial weights.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Names ending with one of these are buffers, not trainable parameters.
const BUFFER_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, self.device.clone())
    }

    /// Creates (or returns the existing) variable `name`.
    pub fn var(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        let shape = shape.into();
        let mut map = self.varmap.data().lock().expect("varmap poisoned");
        if let Some(existing) = map.get(name) {
            if existing.shape() != &shape {
                return Err(Error::Config(format!(
                    "parameter {name} requested with shape {shape:?}, stored as {:?}",
                    existing.shape()
                )));
            }
            return Ok(existing.clone());
        }
        let tensor = self.seeded_tensor(&shape, init)?;
        let var = Var::from_tensor(&tensor)?;
        map.insert(name.to_string(), var.clone());
        Ok(var)
    }

    fn seeded_tensor(&self, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng poisoned");
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * std_normal(&mut *rng))
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                    FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    NormalOrUniform::Normal => {
                        (0..n).map(|_| std * std_normal(&mut *rng)).collect()
                    }
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.sorted()
            .into_iter()
            .filter(|(name, _)| !BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s)))
            .map(|(_, v)| v)
            .collect()
    }

    fn sorted(&self) -> Vec<(String, Var)> {
        let map = self.varmap.data().lock().expect("varmap poisoned");
        let sorted: BTreeMap<_, _> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sorted.into_iter().collect()
    }

    /// Deep copy of every variable, buffers included.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.sorted()
            .into_iter()
            .map(|(name, var)| Ok((name, var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        let map = self.varmap.data().lock().expect("varmap poisoned");
        for (name, var) in map.iter() {
            let value = snapshot
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks parameter {name}")))?;
            var.set(value)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    /// Loads weights saved by [`ParamStore::save`] into already-constructed variables.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.varmap
            .load(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Stable digest over parameter names and values.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, var) in self.sorted() {
            hasher.update(name.as_bytes());
            let values = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        _dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let var = self
            .var(name, s, h)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        var.as_tensor().to_dtype(dtype)
    }

    fn get_unchecked(
        &self,
        name: &str,
        dtype: DType,
        _dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let map = self.varmap.data().lock().expect("varmap poisoned");
        match map.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap
            .data()
            .lock()
            .expect("varmap poisoned")
            .contains_key(name)
    }
}
