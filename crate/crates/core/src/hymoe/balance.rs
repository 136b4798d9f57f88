use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Mean gate vector of a block over the non-padding tokens it routed.
#[derive(Clone, Copy, Debug)]
pub struct GateStats {
    /// `[E]` per-expert mean gate probability.
    pub mean_gate: Var,
    pub token_count: usize,
}

impl GateStats {
    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.mean_gate).data().to_vec()
    }
}

/// `sum_e g_e ln g_e` of the mean gate vector, with `0 ln 0 = 0`.
///
/// Lies in `[-ln E, 0]`; minimizing it pushes expert usage toward uniform.
pub fn load_balance_loss(tape: &mut Tape, stats: &GateStats) -> Result<Var> {
    if stats.token_count == 0 {
        return Err(Error::Contract(
            "load-balance loss needs at least one routed token".into(),
        ));
    }
    let terms = tape.xlogx(stats.mean_gate)?;
    tape.sum(terms)
}

/// Running per-expert usage across batches, merged in call order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateUsage {
    sums: Vec<f64>,
    tokens: usize,
}

impl GateUsage {
    pub fn new(n_experts: usize) -> Self {
        Self {
            sums: vec![0.0; n_experts],
            tokens: 0,
        }
    }

    pub fn add(&mut self, mean_gate: &[f64], token_count: usize) {
        for (s, g) in self.sums.iter_mut().zip(mean_gate) {
            *s += g * token_count as f64;
        }
        self.tokens += token_count;
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.tokens.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }

    /// Shannon entropy (nats) of the mean usage; `ln E` when perfectly balanced.
    pub fn entropy(&self) -> f64 {
        usage_entropy(&self.mean())
    }
}

pub fn usage_entropy(mean_gate: &[f64]) -> f64 {
    -mean_gate
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|g| g * g.ln())
        .sum::<f64>()
}
