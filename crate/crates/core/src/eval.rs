//! Leave-one-out ranking evaluation: every user's held-out item is ranked
//! against the full catalog.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Model, Pass};
use crate::data::{sequential_batches, Phase, Split};
use crate::error::{Error, Result};
use crate::hymoe::GateUsage;

/// 1-based rank of `target` among the non-excluded entries of `scores`.
/// Ties count against the target: every other item scoring at least as
/// high is ranked above it.
pub fn rank_target(scores: &[f64], target: usize, exclusions: &[usize]) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::contract(format!(
            "target {target} outside {} scores",
            scores.len()
        )));
    }
    if exclusions.contains(&target) {
        return Err(Error::contract(format!("target {target} is excluded")));
    }
    if let Some(j) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: format!("score of item {j}"),
        });
    }
    let mut excluded = vec![false; scores.len()];
    for &e in exclusions.iter().filter(|&&e| e < scores.len()) {
        excluded[e] = true;
    }
    let st = scores[target];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && !excluded[j] && s >= st)
        .count();
    Ok(1 + above)
}

fn check_ranks(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::contract("metrics need at least one rank"));
    }
    if k == 0 {
        return Err(Error::contract("cutoff K must be >= 1"));
    }
    if ranks.contains(&0) {
        return Err(Error::contract("ranks are 1-based"));
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(gain / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phase: Phase,
    pub users: usize,
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// Entropy (nats) of the mean gate vector of each hybrid layer.
    pub usage_entropy: Vec<f64>,
    pub mean_usage: Vec<Vec<f64>>,
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub metric: String,
    pub value: f64,
}

impl MetricsReport {
    pub fn from_ranks(phase: Phase, ranks: Vec<usize>, usage: &[GateUsage]) -> Result<Self> {
        Ok(Self {
            phase,
            users: ranks.len(),
            hr1: hr_at_k(&ranks, 1)?,
            hr5: hr_at_k(&ranks, 5)?,
            hr10: hr_at_k(&ranks, 10)?,
            ndcg5: ndcg_at_k(&ranks, 5)?,
            ndcg10: ndcg_at_k(&ranks, 10)?,
            usage_entropy: usage.iter().map(GateUsage::entropy).collect(),
            mean_usage: usage.iter().map(GateUsage::mean).collect(),
            ranks,
        })
    }

    pub fn records(&self, step: u64, epoch: u64) -> Vec<MetricRecord> {
        let mut named = vec![
            ("HR@1".to_string(), self.hr1),
            ("HR@5".to_string(), self.hr5),
            ("HR@10".to_string(), self.hr10),
            ("NDCG@5".to_string(), self.ndcg5),
            ("NDCG@10".to_string(), self.ndcg10),
        ];
        for (l, h) in self.usage_entropy.iter().enumerate() {
            named.push((format!("usage_entropy.layer{l}"), *h));
        }
        named
            .into_iter()
            .map(|(metric, value)| MetricRecord {
                step,
                epoch,
                phase: self.phase,
                metric,
                value,
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} ({} users)\n", self.phase, self.users);
        for (name, v) in [
            ("HR@1", self.hr1),
            ("HR@5", self.hr5),
            ("HR@10", self.hr10),
            ("NDCG@5", self.ndcg5),
            ("NDCG@10", self.ndcg10),
        ] {
            let _ = writeln!(s, "  {name:<8} {v:.4}");
        }
        for (l, h) in self.usage_entropy.iter().enumerate() {
            let _ = writeln!(s, "  usage entropy layer {l}: {h:.4}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Drop the user's input items from the candidate list.
    pub exclude_seen: bool,
    /// Optimizer step the model is evaluated at (sets the warm-up factor).
    pub step: u64,
}

/// Ranks each user's held-out item for `phase` under full-catalog scoring.
pub fn evaluate(model: &Model, split: &Split, phase: Phase, opts: EvalOptions) -> Result<MetricsReport> {
    let examples = split.examples(phase);
    if examples.is_empty() {
        return Err(Error::Data(format!("no {phase} examples to evaluate")));
    }
    let mut usage: Vec<GateUsage> = model
        .hybrid_blocks()
        .map(|b| GateUsage::new(b.n_experts()))
        .collect();
    let mut ranks = Vec::with_capacity(examples.len());
    for (batch, chunk) in sequential_batches(&examples, model.config.max_len, opts.batch_size)?
        .into_iter()
        .zip(examples.chunks(opts.batch_size))
    {
        let mut tape = Tape::new().with_finite_checks(false);
        let p = model.params.bind(&mut tape, false);
        let enc = model.encode_batch(&mut tape, &p, &batch, Pass::eval(opts.step))?;
        for (u, s) in usage.iter_mut().zip(&enc.stats) {
            u.add(&s.values(&tape), s.token_count);
        }
        let logits = model.score(&mut tape, &p, enc.last)?;
        let scores = tape.value(logits);
        for (b, ex) in chunk.iter().enumerate() {
            let mut exclusions = vec![0];
            if opts.exclude_seen {
                exclusions.extend(ex.input.iter().copied().filter(|&i| i != ex.target));
            }
            ranks.push(rank_target(scores.row(b), ex.target, &exclusions)?);
        }
    }
    MetricsReport::from_ranks(phase, ranks, &usage)
}
