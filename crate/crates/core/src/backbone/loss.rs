use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hymoe::{load_balance_loss, GateStats};

/// Mean next-item cross-entropy of `logits: [N, V]` against `targets`,
/// with the padding column left out of the softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let v = shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t == 0 || t >= v) {
        return Err(Error::contract(format!(
            "target {bad} is padding or outside the {v}-item vocabulary"
        )));
    }
    let mask = (0..targets.len() * v).map(|i| i % v != 0).collect();
    let logp = tape.log_softmax(logits, Some(mask))?;
    let picked = tape.pick(logp, targets.to_vec())?;
    let sum = tape.sum(picked)?;
    tape.scale(sum, -1.0 / targets.len() as f64)
}

/// Scalar parts of the objective, read back from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Sum of the per-layer load-balance terms (unweighted).
    pub lb: f64,
    pub total: f64,
    pub layer_lb: Vec<f64>,
    pub mean_gates: Vec<Vec<f64>>,
    pub token_counts: Vec<usize>,
}

/// `ce + lb_weight * sum_layers lb_layer`. Layers that routed no tokens
/// contribute nothing.
pub fn total_loss(tape: &mut Tape, ce: Var, stats: &[GateStats], lb_weight: f64) -> Result<(Var, LossBreakdown)> {
    if lb_weight.is_nan() || lb_weight < 0.0 {
        return Err(Error::contract(format!("lb_weight must be >= 0, got {lb_weight}")));
    }
    let mut layer_lb = Vec::new();
    let mut lb_sum: Option<Var> = None;
    for s in stats.iter().filter(|s| s.token_count > 0) {
        let term = load_balance_loss(tape, s)?;
        layer_lb.push(tape.value(term).item());
        lb_sum = Some(match lb_sum {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = match lb_sum {
        Some(lb) => {
            let weighted = tape.scale(lb, lb_weight)?;
            tape.add(ce, weighted)?
        }
        None => ce,
    };
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item(),
        lb: lb_sum.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(total).item(),
        layer_lb,
        mean_gates: stats.iter().map(|s| s.values(tape)).collect(),
        token_counts: stats.iter().map(|s| s.token_count).collect(),
    };
    Ok((total, breakdown))
}
