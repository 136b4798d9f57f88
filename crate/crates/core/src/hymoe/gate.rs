use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Routing outcome for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Raw router logits, length E.
    pub logits: Vec<f64>,
    /// Selected experts, ascending, length K.
    pub indices: Vec<usize>,
    /// Softmax over the selected logits, aligned with `indices`.
    pub weights: Vec<f64>,
    /// Length-E gate vector, zero off the selected support.
    pub gate: Vec<f64>,
}

/// Batched top-k gating recorded on a tape.
#[derive(Clone, Debug)]
pub struct Gating {
    /// `[N, K]` softmax weights over the retained logits.
    pub weights: Var,
    /// `[N, E]` full gate vectors.
    pub gate: Var,
    /// Selected expert per (token, slot), row-major `N * K`, ascending per token.
    pub indices: Vec<usize>,
    pub top_k: usize,
    pub n_experts: usize,
}

/// Keeps the `k` largest logits of each row and softmaxes over them only.
/// Non-retained experts get weight exactly 0 and receive no gradient.
pub fn topk_gate(tape: &mut Tape, logits: Var, k: usize) -> Result<Gating> {
    let n_experts = tape.value(logits).last_dim();
    if k == 0 || k > n_experts {
        return Err(Error::Contract(format!(
            "top-k gating needs 1 <= K <= E, got K={k}, E={n_experts}"
        )));
    }
    let (kept, indices) = tape.top_k(logits, k)?;
    let weights = tape.softmax(kept, None)?;
    let gate = tape.scatter_cols(weights, indices.clone(), n_experts)?;
    Ok(Gating {
        weights,
        gate,
        indices,
        top_k: k,
        n_experts,
    })
}

impl Gating {
    pub fn tokens(&self, tape: &Tape) -> usize {
        tape.value(self.gate).rows()
    }

    pub fn decision(&self, tape: &Tape, logits: Var, token: usize) -> GateDecision {
        let k = self.top_k;
        GateDecision {
            logits: tape.value(logits).row(token).to_vec(),
            indices: self.indices[token * k..(token + 1) * k].to_vec(),
            weights: tape.value(self.weights).row(token).to_vec(),
            gate: tape.value(self.gate).row(token).to_vec(),
        }
    }

    pub fn decisions(&self, tape: &Tape, logits: Var) -> Vec<GateDecision> {
        (0..self.tokens(tape))
            .map(|t| self.decision(tape, logits, t))
            .collect()
    }
}

/// Single-token gating without gradients.
pub fn gate_decision(logits: &[f64], k: usize) -> Result<GateDecision> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![1, logits.len()], logits.to_vec())?);
    let g = topk_gate(&mut tape, l, k)?;
    Ok(g.decision(&tape, l, 0))
}
