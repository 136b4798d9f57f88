use super::balance::GateStats;
use super::experts::ExpertBank;
use super::fusion::{aef_fuse, warmup_factor, AefState};
use super::gate::{topk_gate, Gating};
use super::router::Router;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct HyMoEConfig {
    pub dim: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub router_hidden: usize,
    pub warmup_steps: u64,
}

/// Dense shared expert in parallel with a routed sparse expert branch,
/// combined by adaptive fusion.
#[derive(Clone, Debug)]
pub struct HyMoEBlock {
    pub router: Router,
    pub bank: ExpertBank,
    pub aef: AefState,
    pub top_k: usize,
}

/// Routing artifacts of one block forward, over the non-padding rows only.
#[derive(Clone, Debug)]
pub struct Routing {
    /// `[R, E]` router logits.
    pub logits: Var,
    pub gating: Gating,
    /// Positions (in the block input) of the routed rows.
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Var,
    pub stats: GateStats,
    pub routing: Option<Routing>,
    /// Tokens processed by each specialized expert.
    pub expert_evaluations: Vec<usize>,
}

impl HyMoEBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HyMoEConfig, seed: u64) -> Result<Self> {
        if cfg.top_k == 0 || cfg.top_k > cfg.n_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= K <= E (K={}, E={})",
                cfg.top_k, cfg.n_experts
            )));
        }
        if cfg.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        let bank = ExpertBank::new(store, name, cfg.dim, cfg.d_ff, cfg.n_experts, seed);
        let router = Router::new(
            store,
            &format!("{name}.router"),
            cfg.dim,
            cfg.router_hidden,
            cfg.n_experts,
            seed,
        );
        let alpha_param = store.add(format!("{name}.alpha"), Tensor::zeros(&[1]));
        Ok(Self {
            router,
            bank,
            aef: AefState {
                alpha_param,
                warmup_steps: cfg.warmup_steps,
                force_zero: false,
            },
            top_k: cfg.top_k,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.bank.n_experts()
    }

    /// Block forward on `h: [N, D]`. Rows with `token_mask[i] == false`
    /// (padding) get the dense branch only and are excluded from routing
    /// and from the gate statistics.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, h: Var, token_mask: &[bool], step: u64) -> Result<BlockOutput> {
        let n = tape.value(h).rows();
        if token_mask.len() != n {
            return Err(Error::Shape {
                op: "hymoe_block",
                lhs: tape.value(h).shape().to_vec(),
                rhs: vec![token_mask.len()],
            });
        }
        let y_dense = self.bank.dense_forward(tape, p, h)?;
        let rows: Vec<usize> = (0..n).filter(|&i| token_mask[i]).collect();
        let e = self.n_experts();
        if rows.is_empty() {
            let mean_gate = tape.constant(Tensor::zeros(&[e]));
            return Ok(BlockOutput {
                output: y_dense,
                stats: GateStats {
                    mean_gate,
                    token_count: 0,
                },
                routing: None,
                expert_evaluations: vec![0; e],
            });
        }

        let x = tape.gather_rows(h, rows.clone())?;
        let logits = self.router.route(tape, p, x)?;
        let gating = topk_gate(tape, logits, self.top_k)?;
        let moe = self.bank.moe_forward(tape, p, x, &gating)?;
        let y_moe = tape.index_add_rows(moe.output, rows.clone(), n)?;

        let w = if self.aef.force_zero {
            0.0
        } else {
            warmup_factor(step, self.aef.warmup_steps)?
        };
        let output = aef_fuse(tape, y_dense, y_moe, p.var(self.aef.alpha_param), w)?;
        let mean_gate = tape.mean_rows(gating.gate)?;
        Ok(BlockOutput {
            output,
            stats: GateStats {
                mean_gate,
                token_count: rows.len(),
            },
            routing: Some(Routing {
                logits,
                gating,
                rows,
            }),
            expert_evaluations: moe.evaluations,
        })
    }
}
