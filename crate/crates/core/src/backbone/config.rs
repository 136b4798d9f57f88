use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hymoe::HyMoEConfig;

/// Encoder hyperparameters. `vocab_size` counts the padding id 0, so real
/// items are `1..vocab_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub router_hidden: usize,
    pub warmup_steps: u64,
    pub lb_weight: f64,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Replace every expert block by its shared FFN alone (baseline encoder).
    pub uniform_pffn: bool,
    /// Pin the fusion weight to zero regardless of step.
    pub force_alpha_zero: bool,
    /// Keep `alpha_param` at its initial value.
    pub freeze_alpha: bool,
    /// Supervise every non-padding position instead of only the last.
    pub per_position: bool,
}

impl ModelConfig {
    /// Default architecture for a catalog of `vocab_size - 1` items.
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        let mut cfg = Self {
            dim: 0,
            max_len,
            n_layers: 2,
            n_heads: 2,
            n_experts: 4,
            top_k: 2,
            d_ff: 0,
            router_hidden: 0,
            warmup_steps: 500,
            lb_weight: 0.02,
            dropout: 0.2,
            vocab_size,
            uniform_pffn: false,
            force_alpha_zero: false,
            freeze_alpha: false,
            per_position: false,
        };
        cfg.set_dim(64);
        cfg
    }

    /// Sets the width and the widths derived from it (`d_ff = 4D`, `H_r = D/2`).
    pub fn set_dim(&mut self, dim: usize) {
        self.dim = dim;
        self.d_ff = 4 * dim;
        self.router_hidden = (dim / 2).max(1);
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn block_config(&self) -> HyMoEConfig {
        HyMoEConfig {
            dim: self.dim,
            d_ff: self.d_ff,
            n_experts: self.n_experts,
            top_k: self.top_k,
            router_hidden: self.router_hidden,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("dim", self.dim),
            ("max_len", self.max_len),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("d_ff", self.d_ff),
            ("router_hidden", self.router_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return fail(format!(
                "top_k must satisfy 1 <= K <= E (K={}, E={})",
                self.top_k, self.n_experts
            ));
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be >= 1".into());
        }
        if !self.lb_weight.is_finite() || self.lb_weight < 0.0 {
            return fail(format!("lb_weight must be finite and >= 0, got {}", self.lb_weight));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must include padding and at least one item".into());
        }
        Ok(())
    }
}
