//! Bidirectional LSTM over an ordered set of prototypes followed by a
//! sigmoid feed-forward head. Shared by the attribute selector (one output
//! per attribute) and the participation gate (a single output).

use candle_core::{IndexOp, Tensor};
use candle_nn::rnn::{Direction, LSTMConfig, RNN};
use candle_nn::{Module, LSTM};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Hidden size of each direction.
    pub hidden: usize,
    pub output_dim: usize,
}

pub struct SetEncoder {
    config: EncoderConfig,
    forward: LSTM,
    backward: LSTM,
    head: candle_nn::Linear,
}

impl SetEncoder {
    pub fn new(config: &EncoderConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.output_dim == 0 {
            return Err(Error::Config(format!("degenerate encoder {config:?}")));
        }
        let vb = store.var_builder().pp(prefix);
        let lstm = |direction| {
            candle_nn::lstm(
                config.input_dim,
                config.hidden,
                LSTMConfig {
                    direction,
                    ..Default::default()
                },
                vb.pp("lstm"),
            )
        };
        let forward = lstm(Direction::Forward)?;
        let backward = lstm(Direction::Backward)?;
        let head = candle_nn::linear(2 * config.hidden, config.output_dim, vb.pp("head"))?;
        Ok(Self {
            config: config.clone(),
            forward,
            backward,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `sequence: (N, input_dim)` → `(output_dim,)` with entries in `(0, 1)`.
    pub fn forward(&self, sequence: &Tensor) -> Result<Tensor> {
        let (n, d) = sequence.dims2()?;
        if d != self.config.input_dim {
            return Err(Error::Validation(format!(
                "encoder expects {}-dimensional prototypes, got {d}",
                self.config.input_dim
            )));
        }
        if n == 0 {
            return Err(Error::Validation(
                "encoder needs at least one prototype".into(),
            ));
        }
        let seq = sequence.unsqueeze(0)?;
        let states = self.forward.seq(&seq)?;
        let last_fwd = states.last().expect("nonempty sequence").h().clone();
        let order: Vec<u32> = (0..n as u32).rev().collect();
        let order = Tensor::from_vec(order, n, sequence.device())?;
        let reversed = sequence.index_select(&order, 0)?.unsqueeze(0)?;
        let states = self.backward.seq(&reversed)?;
        let last_bwd = states.last().expect("nonempty sequence").h().clone();
        let joined = Tensor::cat(&[last_fwd, last_bwd], 1)?;
        let logits = self.head.forward(&joined)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.i(0)?)
    }
}
