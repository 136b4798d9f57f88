//! Causal self-attention encoder hosting the expert blocks.
//!
//! Each layer is post-norm: `h = LN(h + attn(h))`, then
//! `h = LN(h + ffn(h))`, where `ffn` is a hybrid expert block (or, in the
//! uniform baseline, its shared expert alone). Sequences are left-padded;
//! the representation of a sequence is the final hidden state at its last
//! position, scored against the item embedding table.

mod attention;
mod config;
mod loss;
mod model;

pub use attention::{causal_mask, SelfAttention};
pub use config::ModelConfig;
pub use loss::{cross_entropy, total_loss, LossBreakdown};
pub use model::{Encoded, EncoderLayer, FeedForwardLayer, Model, Pass};

#[cfg(test)]
mod tests;
