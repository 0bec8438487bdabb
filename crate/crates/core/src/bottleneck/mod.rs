//! Entropy bottleneck: quantization, the learned factorized density, frozen
//! integer tables and the range coder.

pub mod cdf_table;
pub mod entropy_model;
pub mod quantize;
pub mod range_coder;

pub use cdf_table::{freeze_cdf, CdfTable, ChannelTable, LatentStats};
pub use entropy_model::{likelihood, rate_bits, ChannelCdf, FactorizedEntropyModel};
pub use quantize::{dequantize, quantize_eval, quantize_train, QuantizedLatent};
pub use range_coder::{rc_decode, rc_encode};
