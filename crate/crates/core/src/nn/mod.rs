//! Neural building blocks on top of candle.

pub mod backbone;
pub mod encoder;
pub mod mlp;
pub mod ops;
pub mod params;

pub use backbone::{AttributeNet, BackboneConfig};
pub use encoder::{EncoderConfig, SetEncoder};
pub use mlp::ScalarMlp;
pub use params::ParamStore;

use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Plain Adam: decoupled weight decay disabled.
pub fn adam(store: &ParamStore, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(AdamW::new(store.trainable(), params)?)
}
