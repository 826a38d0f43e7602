//! Desk-scale lab for a dynamic-compression speech tokenizer.
//!
//! Frame features are merged into a fixed number of tokens by soft
//! integrate-and-fire, quantized with FSQ, and decoded by a CTC head, an
//! attention decoder and a mel reconstruction decoder. Two probes read the
//! resulting tokens: a conditional flow-matching generator and a
//! frozen-backbone multiple-choice classifier.

pub mod autograd;
pub mod corpus;
pub mod decoders;
pub mod diagnostics;
pub mod dynamic_merge;
pub mod encoder;
pub mod error;
pub mod fsq;
pub mod harness;
pub mod nn;
pub mod params;
pub mod probes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Mat;
