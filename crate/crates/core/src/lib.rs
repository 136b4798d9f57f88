//! Sequential recommendation with a hybrid dense/sparse mixture-of-experts
//! feed-forward block.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), the expert block ([`hymoe`]), a causal self-attention
//! encoder hosting it ([`backbone`]), data ingestion ([`data`]), training
//! ([`training`]) and ranking evaluation ([`eval`]).

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod hymoe;
pub mod nn;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
