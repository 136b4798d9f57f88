use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Linear, ParamStore};

/// Two-layer routing network `D -> H_r -> E` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Router {
    pub hidden: Linear,
    pub out: Linear,
}

impl Router {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, n_experts: usize, seed: u64) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, hidden, seed),
            out: Linear::new(store, &format!("{name}.out"), hidden, n_experts, seed),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.out.out_dim
    }

    /// Routing logits `[N, E]` for token representations `x: [N, D]`.
    pub fn route(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let width = tape.value(x).last_dim();
        if tape.value(x).ndim() != 2 || width != self.hidden.in_dim {
            return Err(Error::Contract(format!(
                "router expects [N, {}] input, got {:?}",
                self.hidden.in_dim,
                tape.value(x).shape()
            )));
        }
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }

    /// Pre-activation of the hidden layer; used to detect ReLU kinks.
    pub fn hidden_preactivation(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        self.hidden.forward(tape, p, x)
    }
}
