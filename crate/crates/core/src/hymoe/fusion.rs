use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Linear warm-up `min(1, t / T)` of the sparse branch's weight.
pub fn warmup_factor(step: u64, warmup_steps: u64) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(Error::Contract("warm-up duration must be at least 1 step".into()));
    }
    Ok((step as f64 / warmup_steps as f64).min(1.0))
}

/// Fusion state of one block: the learnable `alpha_param` and the schedule.
#[derive(Clone, Debug)]
pub struct AefState {
    pub alpha_param: ParamId,
    pub warmup_steps: u64,
    /// Ablation switch: the sparse branch is multiplied by exactly 0.
    pub force_zero: bool,
}

impl AefState {
    /// `sigmoid(alpha_param) * w(t)`, in `[0, 1)`.
    pub fn effective_alpha(&self, store: &ParamStore, step: u64) -> Result<f64> {
        if self.force_zero {
            return Ok(0.0);
        }
        Ok(sigmoid(store.get(self.alpha_param).item()) * warmup_factor(step, self.warmup_steps)?)
    }
}

/// `y_dense + sigmoid(alpha_param) * w * y_moe`.
///
/// `w` is a schedule constant and carries no gradient; `alpha_param` does.
pub fn aef_fuse(tape: &mut Tape, y_dense: Var, y_moe: Var, alpha_param: Var, w: f64) -> Result<Var> {
    if tape.value(y_dense).shape() != tape.value(y_moe).shape() {
        return Err(Error::Shape {
            op: "aef_fuse",
            lhs: tape.value(y_dense).shape().to_vec(),
            rhs: tape.value(y_moe).shape().to_vec(),
        });
    }
    let gate = tape.sigmoid(alpha_param)?;
    let alpha = tape.scale(gate, w)?;
    let sparse = tape.mul_scalar(y_moe, alpha)?;
    tape.add(y_dense, sparse)
}
