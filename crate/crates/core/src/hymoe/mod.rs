//! Hybrid mixture-of-experts feed-forward block.
//!
//! Every token goes through a shared dense FFN. In parallel a small router
//! scores the `E` specialized experts, the top `K` logits are softmaxed into
//! sparse gate weights, and the selected experts' outputs are mixed. The two
//! branches are combined as `y_dense + sigmoid(alpha_param) * w(t) * y_moe`,
//! where `w(t) = min(1, t / T_warmup)` ramps the sparse branch in over the
//! first `T_warmup` optimizer steps. A load-balance term `sum_e g_e ln g_e`
//! on the mean gate vector discourages routing collapse.

mod balance;
mod block;
mod experts;
mod fusion;
mod gate;
mod router;

pub use balance::{load_balance_loss, usage_entropy, GateStats, GateUsage};
pub use block::{BlockOutput, HyMoEBlock, HyMoEConfig, Routing};
pub use experts::{ExpertBank, MoeOutput};
pub use fusion::{aef_fuse, warmup_factor, AefState};
pub use gate::{gate_decision, topk_gate, GateDecision, Gating};
pub use router::Router;
