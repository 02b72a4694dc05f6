//! Four-block convolutional attribute network.
//!
//! Each block is conv3x3 → batch norm → ReLU → 2×2 max pool. The last block's
//! channel count equals the output width, followed by global average
//! pooling, one linear layer and a tanh squashed into `[0, 1]`.

use candle_core::{DType, Tensor, Var, D};
use candle_nn::{Init, Module};
use serde::{Deserialize, Serialize};

use super::ops::{self, BN_EPS};
use super::params::ParamStore;
use crate::error::{Error, Result};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Width of every block except the last.
    pub hidden_channels: usize,
    /// Width of the last block and of the output vector.
    pub out_dim: usize,
    pub blocks: usize,
}

impl BackboneConfig {
    pub fn conv4(out_dim: usize) -> Self {
        Self {
            in_channels: 3,
            hidden_channels: 64,
            out_dim,
            blocks: 4,
        }
    }

    fn channels(&self) -> Vec<usize> {
        let mut c = vec![self.in_channels];
        c.extend(std::iter::repeat_n(self.hidden_channels, self.blocks - 1));
        c.push(self.out_dim);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0
            || self.out_dim == 0
            || self.in_channels == 0
            || self.hidden_channels == 0
        {
            return Err(Error::Config(format!("degenerate backbone {self:?}")));
        }
        Ok(())
    }

    /// Smallest input side that survives every pooling stage.
    pub fn min_input_side(&self) -> usize {
        1 << self.blocks
    }
}

struct ConvBlock {
    kernel: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl ConvBlock {
    fn new(store: &ParamStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            kernel: store
                .var(
                    &format!("{prefix}.conv.weight"),
                    (cout, cin, 3, 3),
                    candle_nn::init::DEFAULT_KAIMING_UNIFORM,
                )?
                .as_tensor()
                .clone(),
            gamma: store
                .var(&format!("{prefix}.bn.weight"), cout, Init::Const(1.0))?
                .as_tensor()
                .clone(),
            beta: store
                .var(&format!("{prefix}.bn.bias"), cout, Init::Const(0.0))?
                .as_tensor()
                .clone(),
            running_mean: store.var(
                &format!("{prefix}.bn.running_mean"),
                cout,
                Init::Const(0.0),
            )?,
            running_var: store.var(&format!("{prefix}.bn.running_var"), cout, Init::Const(1.0))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = ops::conv3x3(x, &self.kernel)?;
        let h = if train {
            let (out, stats) = ops::batch_norm_train(&h, &self.gamma, &self.beta)?;
            self.update_running(&stats)?;
            out
        } else {
            let c = self.gamma.dim(0)?;
            let dtype = h.dtype();
            let scale = (self
                .running_var
                .as_tensor()
                .affine(1.0, BN_EPS)?
                .sqrt()?
                .recip()?
                * &self.gamma)?;
            let shift = (&self.beta - (self.running_mean.as_tensor() * &scale)?)?;
            let scale = scale.to_dtype(dtype)?.reshape((1, c, 1, 1))?;
            let shift = shift.to_dtype(dtype)?.reshape((1, c, 1, 1))?;
            h.broadcast_mul(&scale)?.broadcast_add(&shift)?
        };
        Ok(ops::max_pool2(&h.relu()?)?)
    }

    fn update_running(&self, stats: &ops::BatchStats) -> Result<()> {
        let n = stats.count as f64;
        let unbiased: Vec<f64> = stats
            .var
            .iter()
            .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
            .collect();
        let blend = |var: &Var, batch: &[f64]| -> Result<()> {
            let old = var.as_tensor();
            let batch =
                Tensor::from_slice(batch, batch.len(), old.device())?.to_dtype(old.dtype())?;
            let next = ((old * (1.0 - BN_MOMENTUM))? + (batch * BN_MOMENTUM)?)?;
            var.set(&next)?;
            Ok(())
        };
        blend(&self.running_mean, &stats.mean)?;
        blend(&self.running_var, &unbiased)
    }
}

/// Image → attribute-vector network (used for both the human-friendly and
/// the unknown attribute predictors).
pub struct AttributeNet {
    config: BackboneConfig,
    blocks: Vec<ConvBlock>,
    head: candle_nn::Linear,
}

impl AttributeNet {
    pub fn new(config: &BackboneConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let blocks = (0..config.blocks)
            .map(|i| ConvBlock::new(store, &format!("{prefix}.block{i}"), ch[i], ch[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let head = candle_nn::linear(
            config.out_dim,
            config.out_dim,
            store.var_builder().pp(format!("{prefix}.head")),
        )?;
        Ok(Self {
            config: config.clone(),
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `images: (B, C, H, W)` → `(B, out_dim)` with every entry in `[0, 1]`.
    ///
    /// In training mode batch norm uses batch statistics and updates its
    /// running averages; otherwise the running averages are used and the
    /// output depends only on the input.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Validation(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let min = self.config.min_input_side();
        if h < min || w < min {
            return Err(Error::Validation(format!(
                "input {h}x{w} is smaller than {min}x{min}"
            )));
        }
        let mut x = images.clone();
        for block in &self.blocks {
            x = block.forward(&x, train)?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let z = self.head.forward(&pooled)?;
        Ok(((z.tanh()? + 1.0)? * 0.5)?)
    }

    /// Inference without graph tracking, in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.dim(0)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            parts.push(
                self.forward(&images.narrow(0, start, len)?, false)?
                    .detach(),
            );
            start += len;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(
                (0, self.config.out_dim),
                DType::F32,
                images.device(),
            )?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}
