use rand::Rng;

use super::attention::SelfAttention;
use super::config::ModelConfig;
use super::loss::{cross_entropy, total_loss, LossBreakdown};
use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::hymoe::{ExpertBank, GateStats, HyMoEBlock, Routing};
use crate::nn::{init, Bindings, LayerNorm, ParamId, ParamStore};
use crate::rng;

/// Feed-forward sublayer of one encoder layer.
#[derive(Clone, Debug)]
pub enum FeedForwardLayer {
    Hybrid(HyMoEBlock),
    /// Shared expert only; the uniform-FFN baseline.
    Uniform(ExpertBank),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: SelfAttention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForwardLayer,
    pub ffn_norm: LayerNorm,
}

/// Causal self-attention encoder whose feed-forward sublayers are expert
/// blocks. Scoring reuses the item embedding table.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub item_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
}

/// Per-forward settings: the optimizer step driving the warm-up, and the
/// dropout seed (`None` disables dropout).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub step: u64,
    pub dropout_seed: Option<u64>,
}

impl Pass {
    pub fn eval(step: u64) -> Self {
        Self {
            step,
            dropout_seed: None,
        }
    }

    pub fn train(step: u64, seed: u64) -> Self {
        Self {
            step,
            dropout_seed: Some(seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B*L, D]` final hidden states.
    pub hidden: Var,
    /// `[B, D]` hidden state at each row's last position.
    pub last: Var,
    pub token_mask: Vec<bool>,
    /// One entry per hybrid layer (empty for the uniform baseline).
    pub stats: Vec<GateStats>,
    pub routing: Vec<Option<Routing>>,
    pub expert_evaluations: Vec<Vec<usize>>,
    /// Input of each feed-forward sublayer.
    pub ffn_inputs: Vec<Var>,
}

/// Deterministic dropout: the mask of the `site`-th dropout call at a given
/// step comes from its own stream.
struct Dropout {
    rate: f64,
    seed: Option<u64>,
    step: u64,
    site: u64,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(seed) = self.seed else { return Ok(x) };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let mut r = rng::stream(seed, "dropout", &[self.step, self.site]);
        self.site += 1;
        let keep: Vec<bool> = (0..tape.value(x).numel())
            .map(|_| r.random::<f64>() >= self.rate)
            .collect();
        tape.dropout(x, &keep, self.rate)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let std = (1.0 / d as f64).sqrt();
        let mut params = ParamStore::new();

        let mut table = init::normal(seed, "item_embedding", &[config.vocab_size, d], std);
        table.data_mut()[..d].fill(0.0);
        let item_embedding = params.add("item_embedding", table);
        params.param_mut(item_embedding).zero_rows = vec![0];
        let position_embedding = params.add(
            "position_embedding",
            init::normal(seed, "position_embedding", &[config.max_len, d], std),
        );

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let name = format!("layers.{i}");
            let attention = SelfAttention::new(&mut params, &format!("{name}.attention"), d, config.n_heads, seed);
            let attention_norm = LayerNorm::new(&mut params, &format!("{name}.attention_norm"), d);
            let ffn_name = format!("{name}.ffn");
            let ffn = if config.uniform_pffn {
                FeedForwardLayer::Uniform(ExpertBank::dense_only(&mut params, &ffn_name, d, config.d_ff, seed))
            } else {
                let mut block = HyMoEBlock::new(&mut params, &ffn_name, &config.block_config(), seed)?;
                block.aef.force_zero = config.force_alpha_zero;
                if config.freeze_alpha {
                    params.param_mut(block.aef.alpha_param).trainable = false;
                }
                FeedForwardLayer::Hybrid(block)
            };
            let ffn_norm = LayerNorm::new(&mut params, &format!("{name}.ffn_norm"), d);
            layers.push(EncoderLayer {
                attention,
                attention_norm,
                ffn,
                ffn_norm,
            });
        }
        Ok(Self {
            config,
            params,
            item_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn hybrid_blocks(&self) -> impl Iterator<Item = &HyMoEBlock> {
        self.layers.iter().filter_map(|l| match &l.ffn {
            FeedForwardLayer::Hybrid(b) => Some(b),
            FeedForwardLayer::Uniform(_) => None,
        })
    }

    /// Item plus position embedding for `items: [batch, len]` (row-major,
    /// left-padded). Positions count back from the end of each row, so a
    /// token's position embedding does not depend on how much padding
    /// precedes it.
    pub fn embed(&self, tape: &mut Tape, p: &Bindings, items: &[usize], batch: usize, len: usize) -> Result<Var> {
        if items.len() != batch * len {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![items.len()],
                rhs: vec![batch, len],
            });
        }
        if len > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "item id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let item = tape.gather_rows(p.var(self.item_embedding), items.to_vec())?;
        let positions = (0..batch * len).map(|i| len - 1 - i % len).collect();
        let pos = tape.gather_rows(p.var(self.position_embedding), positions)?;
        tape.add(item, pos)
    }

    /// Runs the encoder over a `[batch, len]` id matrix.
    pub fn encode(&self, tape: &mut Tape, p: &Bindings, items: &[usize], batch: usize, len: usize, pass: Pass) -> Result<Encoded> {
        if batch == 0 || len == 0 {
            return Err(Error::contract("cannot encode an empty batch"));
        }
        let token_mask: Vec<bool> = items.iter().map(|&i| i != 0).collect();
        let mut drop = Dropout {
            rate: self.config.dropout,
            seed: pass.dropout_seed,
            step: pass.step,
            site: 0,
        };
        let mut h = self.embed(tape, p, items, batch, len)?;
        h = drop.apply(tape, h)?;

        let mut stats = Vec::new();
        let mut routing = Vec::new();
        let mut expert_evaluations = Vec::new();
        let mut ffn_inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.attention.forward(tape, p, h, batch, len, &token_mask)?;
            let a = drop.apply(tape, a)?;
            let a = tape.add(h, a)?;
            h = layer.attention_norm.forward(tape, p, a)?;

            ffn_inputs.push(h);
            let f = match &layer.ffn {
                FeedForwardLayer::Hybrid(block) => {
                    let out = block.forward(tape, p, h, &token_mask, pass.step)?;
                    stats.push(out.stats);
                    routing.push(out.routing);
                    expert_evaluations.push(out.expert_evaluations);
                    out.output
                }
                FeedForwardLayer::Uniform(bank) => bank.dense_forward(tape, p, h)?,
            };
            let f = drop.apply(tape, f)?;
            let f = tape.add(h, f)?;
            h = layer.ffn_norm.forward(tape, p, f)?;
        }
        let last_rows = (0..batch).map(|b| b * len + len - 1).collect();
        let last = tape.gather_rows(h, last_rows)?;
        Ok(Encoded {
            hidden: h,
            last,
            token_mask,
            stats,
            routing,
            expert_evaluations,
            ffn_inputs,
        })
    }

    pub fn encode_batch(&self, tape: &mut Tape, p: &Bindings, batch: &Batch, pass: Pass) -> Result<Encoded> {
        self.encode(tape, p, &batch.items, batch.batch_size, batch.seq_len, pass)
    }

    /// `[N, V]` logits `y . r_j` against every row of the item table.
    /// Column 0 (padding) is present but must be excluded by the consumer.
    pub fn score(&self, tape: &mut Tape, p: &Bindings, y: Var) -> Result<Var> {
        tape.matmul_t(y, p.var(self.item_embedding), false, true)
    }

    /// Training objective on a batch: cross-entropy on the next item plus
    /// the weighted load-balance terms of every hybrid layer.
    pub fn loss(&self, tape: &mut Tape, p: &Bindings, batch: &Batch, pass: Pass) -> Result<(Var, LossBreakdown, Encoded)> {
        let enc = self.encode_batch(tape, p, batch, pass)?;
        let (y, targets) = if self.config.per_position {
            let (rows, targets) = position_targets(batch);
            (tape.gather_rows(enc.hidden, rows)?, targets)
        } else {
            (enc.last, batch.targets.clone())
        };
        let logits = self.score(tape, p, y)?;
        let ce = cross_entropy(tape, logits, &targets)?;
        let (total, breakdown) = total_loss(tape, ce, &enc.stats, self.config.lb_weight)?;
        Ok((total, breakdown, enc))
    }
}

/// Every non-padding position with the item that follows it; the last
/// position's successor is the batch target.
fn position_targets(batch: &Batch) -> (Vec<usize>, Vec<usize>) {
    let l = batch.seq_len;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.batch_size {
        for t in l - batch.lengths[b]..l {
            rows.push(b * l + t);
            targets.push(if t + 1 < l {
                batch.items[b * l + t + 1]
            } else {
                batch.targets[b]
            });
        }
    }
    (rows, targets)
}
