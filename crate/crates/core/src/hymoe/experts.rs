use super::gate::Gating;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, FeedForward, ParamStore};

/// One shared dense expert plus `E` specialized experts, all the same shape.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub shared: FeedForward,
    pub experts: Vec<FeedForward>,
    pub dim: usize,
}

/// Sparse-branch output together with how many tokens each expert processed.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub output: Var,
    pub evaluations: Vec<usize>,
}

impl ExpertBank {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, d_ff: usize, n_experts: usize, seed: u64) -> Self {
        let shared = FeedForward::new(store, &format!("{name}.shared"), dim, d_ff, seed);
        let experts = (0..n_experts)
            .map(|e| FeedForward::new(store, &format!("{name}.experts.{e}"), dim, d_ff, seed))
            .collect();
        Self { shared, experts, dim }
    }

    /// Builds only the shared branch; used by the uniform-FFN ablation.
    pub fn dense_only(store: &mut ParamStore, name: &str, dim: usize, d_ff: usize, seed: u64) -> Self {
        Self {
            shared: FeedForward::new(store, &format!("{name}.shared"), dim, d_ff, seed),
            experts: Vec::new(),
            dim,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let t = tape.value(x);
        if t.ndim() != 2 || t.last_dim() != self.dim {
            return Err(Error::Contract(format!(
                "expert input must be [N, {}], got {:?}",
                self.dim,
                t.shape()
            )));
        }
        Ok(())
    }

    /// Shared expert applied to every row of `x: [N, D]`.
    pub fn dense_forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        self.shared.forward(tape, p, x)
    }

    /// `sum_i g_i f_i(x)` over each token's selected experts. Each expert
    /// runs once on the gathered rows that selected it; experts selected by
    /// no token are not evaluated at all.
    pub fn moe_forward(&self, tape: &mut Tape, p: &Bindings, x: Var, gating: &Gating) -> Result<MoeOutput> {
        self.check_width(tape, x)?;
        let n = tape.value(x).rows();
        let k = gating.top_k;
        if gating.indices.len() != n * k {
            return Err(Error::Contract(format!(
                "gating covers {} slots, expected {}",
                gating.indices.len(),
                n * k
            )));
        }
        if let Some(&bad) = gating.indices.iter().find(|&&e| e >= self.experts.len()) {
            return Err(Error::Contract(format!(
                "expert index {bad} out of range for {} experts",
                self.experts.len()
            )));
        }

        let mut rows_by_expert = vec![Vec::new(); self.experts.len()];
        let mut slots_by_expert = vec![Vec::new(); self.experts.len()];
        for (slot, &e) in gating.indices.iter().enumerate() {
            rows_by_expert[e].push(slot / k);
            slots_by_expert[e].push(slot);
        }

        let flat_weights = tape.reshape(gating.weights, vec![n * k, 1])?;
        let mut parts = Vec::new();
        let mut dest = Vec::new();
        let mut evaluations = vec![0; self.experts.len()];
        for (e, expert) in self.experts.iter().enumerate() {
            let rows = &rows_by_expert[e];
            if rows.is_empty() {
                continue;
            }
            evaluations[e] = rows.len();
            let xe = tape.gather_rows(x, rows.clone())?;
            let ye = expert.forward(tape, p, xe)?;
            let we = tape.gather_rows(flat_weights, slots_by_expert[e].clone())?;
            parts.push(tape.mul_rows(ye, we)?);
            dest.extend_from_slice(rows);
        }
        let output = if parts.is_empty() {
            tape.constant(Tensor::zeros(&[n, self.dim]))
        } else {
            let stacked = tape.concat_rows(&parts)?;
            tape.index_add_rows(stacked, dest, n)?
        };
        Ok(MoeOutput {
            output,
            evaluations,
        })
    }
}
