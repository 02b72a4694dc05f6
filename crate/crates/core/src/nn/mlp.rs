use candle_core::Tensor;
use candle_nn::Module;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// ReLU multi-layer perceptron with a scalar output per row.
pub struct ScalarMlp {
    layers: Vec<candle_nn::Linear>,
    input_dim: usize,
}

impl ScalarMlp {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        store: &ParamStore,
        prefix: &str,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("mlp input width must be positive".into()));
        }
        let vb = store.var_builder().pp(prefix);
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| candle_nn::linear(w[0], w[1], vb.pp(format!("layer{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { layers, input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `x: (B, input_dim)` → `(B,)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(Error::Validation(format!(
                "mlp expects width {}, got {d}",
                self.input_dim
            )));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h.squeeze(1)?)
    }
}
