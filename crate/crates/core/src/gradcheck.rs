//! Whole-model gradient check: autodiff against central finite differences
//! of the training loss, reported per parameter group.
//!
//! Top-K selection and the router's ReLU make the loss piecewise smooth, so
//! a point is only used when every routed token's K-th/(K+1)-th logit gap
//! and every router pre-activation exceed a margin; otherwise a new point
//! is drawn and the reason is noted in the report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_grad, relative_error, Tape};
use crate::backbone::{Model, ModelConfig, Pass};
use crate::data::{Batch, Example};
use crate::error::Result;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Optimizer step the loss is evaluated at; mid warm-up gives the fusion
    /// scalar a non-zero gradient.
    pub step: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Minimum top-K logit gap and router pre-activation magnitude.
    pub margin: f64,
    pub batch_size: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    /// D=8, one layer, E=4, K=2, evaluated halfway through warm-up.
    fn default() -> Self {
        let mut model = ModelConfig::new(13, 6);
        model.set_dim(8);
        model.n_layers = 1;
        model.n_experts = 4;
        model.top_k = 2;
        model.dropout = 0.0;
        Self {
            step: model.warmup_steps / 2,
            model,
            eps: 1e-5,
            tolerance: 1e-4,
            margin: 1e-3,
            batch_size: 4,
            max_attempts: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub scalars: usize,
    /// Largest `|a - n| / max(1, |n|)` over the group's coordinates.
    pub max_error: f64,
    /// `||a - n|| / max(||a||, ||n||)` over the group (0 when both vanish).
    pub norm_error: f64,
    pub grad_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    /// Points drawn, including rejected ones.
    pub attempts: usize,
    pub groups: Vec<GroupResult>,
    /// Why earlier points were rejected.
    pub notes: Vec<String>,
}

impl GradCheckReport {
    /// False when any group fails or no routing-stable point was found.
    pub fn passed(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.passed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        let _ = writeln!(
            s,
            "{:<28} {:>7} {:>11} {:>11} {:>11}  result",
            "group", "scalars", "max_err", "norm_err", "grad_norm"
        );
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<28} {:>7} {:>11.3e} {:>11.3e} {:>11.3e}  {}",
                g.group,
                g.scalars,
                g.max_error,
                g.norm_error,
                g.grad_norm,
                if g.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "tolerance {:e}, {} point(s) drawn: {}",
            self.tolerance,
            self.attempts,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Parameter group of a parameter name: embeddings, then per layer the
/// attention, the norms and each part of the feed-forward block.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let take = match parts.as_slice() {
        ["layers", _, "ffn", ..] => 4,
        ["layers", ..] => 3,
        _ => 1,
    };
    parts[..take.min(parts.len())].join(".")
}

fn random_batch(cfg: &GradCheckConfig, attempt: usize) -> Result<Batch> {
    let mut r = rng::stream(cfg.seed, "gradcheck.batch", &[attempt as u64]);
    let v = cfg.model.vocab_size;
    let examples: Vec<Example> = (0..cfg.batch_size)
        .map(|u| Example {
            user: u,
            input: (0..r.random_range(1..=cfg.model.max_len))
                .map(|_| r.random_range(1..v))
                .collect(),
            target: r.random_range(1..v),
        })
        .collect();
    Batch::from_examples(&examples, cfg.model.max_len)
}

/// Smallest top-K gap over routed tokens and smallest router
/// pre-activation magnitude, over all hybrid layers.
fn routing_margins(model: &Model, batch: &Batch, step: u64) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let enc = model.encode_batch(&mut tape, &p, batch, Pass::eval(step))?;
    let (mut gap, mut kink) = (f64::INFINITY, f64::INFINITY);
    for (block, (routing, &input)) in model
        .hybrid_blocks()
        .zip(enc.routing.iter().zip(&enc.ffn_inputs))
    {
        let Some(routing) = routing else { continue };
        let logits = tape.value(routing.logits).clone();
        for t in 0..logits.rows() {
            let mut row = logits.row(t).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            if block.top_k < row.len() {
                gap = gap.min(row[block.top_k - 1] - row[block.top_k]);
            }
        }
        let rows = tape.gather_rows(input, routing.rows.clone())?;
        let pre = block.router.hidden_preactivation(&mut tape, &p, rows)?;
        kink = tape.value(pre).data().iter().map(|v| v.abs()).fold(kink, f64::min);
    }
    Ok((gap, kink))
}

fn loss_value(model: &Model, batch: &Batch, step: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let (loss, _, _) = model.loss(&mut tape, &p, batch, Pass::eval(step))?;
    Ok(tape.value(loss).item())
}

/// Checks every trainable parameter of a model built from `cfg.model` at a
/// routing-stable random point.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.dropout = 0.0;
    let mut notes = Vec::new();
    for attempt in 0..cfg.max_attempts.max(1) {
        let model = Model::new(model_cfg.clone(), rng::derive_seed(cfg.seed, "gradcheck.model", &[attempt as u64]))?;
        let batch = random_batch(cfg, attempt)?;
        let (gap, kink) = routing_margins(&model, &batch, cfg.step)?;
        if gap <= cfg.margin || kink <= cfg.margin {
            notes.push(format!(
                "point {attempt} resampled: top-K gap {gap:.2e}, router pre-activation {kink:.2e} (margin {:e})",
                cfg.margin
            ));
            continue;
        }
        let mut report = check_point(model, &batch, cfg)?;
        report.attempts = attempt + 1;
        report.notes = notes;
        return Ok(report);
    }
    notes.push(format!("no routing-stable point in {} draws", cfg.max_attempts.max(1)));
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        loss: f64::NAN,
        attempts: cfg.max_attempts.max(1),
        groups: Vec::new(),
        notes,
    })
}

fn check_point(mut model: Model, batch: &Batch, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let (loss, _, _) = model.loss(&mut tape, &p, batch, Pass::eval(cfg.step))?;
    let loss_at = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic = p.grads(&tape);
    drop(tape);

    // per group: (scalars, max error, sum (a-n)^2, sum a^2, sum n^2)
    let mut groups: BTreeMap<String, (usize, f64, f64, f64, f64)> = BTreeMap::new();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if !model.params.param(id).trainable {
            continue;
        }
        let original = model.params.get(id).clone();
        let mut failure = None;
        let numeric = finite_difference_grad(
            |probe| {
                *model.params.get_mut(id) = probe.clone();
                loss_value(&model, batch, cfg.step).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            &original,
            cfg.eps,
        );
        *model.params.get_mut(id) = original;
        if let Some(e) = failure {
            return Err(e);
        }
        let g = groups.entry(param_group(model.params.name(id))).or_default();
        for (&a, &n) in analytic[id.index()].data().iter().zip(numeric.data()) {
            g.0 += 1;
            g.1 = g.1.max(relative_error(a, n));
            g.2 += (a - n) * (a - n);
            g.3 += a * a;
            g.4 += n * n;
        }
    }
    let groups = groups
        .into_iter()
        .map(|(group, (scalars, max_error, diff, aa, nn))| {
            let scale = aa.sqrt().max(nn.sqrt());
            let norm_error = if scale > 0.0 { diff.sqrt() / scale } else { 0.0 };
            GroupResult {
                group,
                scalars,
                max_error,
                norm_error,
                grad_norm: aa.sqrt(),
                passed: max_error < cfg.tolerance && norm_error < cfg.tolerance,
            }
        })
        .collect();
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        loss: loss_at,
        attempts: 1,
        groups,
        notes: Vec::new(),
    })
}
