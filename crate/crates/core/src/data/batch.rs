use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// One next-item prediction: `input` (chronological item ids) predicts `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

/// Left-padded item-id matrix `[batch_size, seq_len]` with one target per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub targets: Vec<usize>,
    /// Non-padding length of each row.
    pub lengths: Vec<usize>,
    pub users: Vec<usize>,
}

impl Batch {
    /// Keeps the most recent `max_len` items of each input and left-pads to
    /// the longest row.
    pub fn from_examples(examples: &[Example], max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("batch needs at least one example"));
        }
        if max_len == 0 {
            return Err(Error::contract("max_len must be >= 1"));
        }
        for ex in examples {
            if ex.input.is_empty() {
                return Err(Error::contract(format!("user {} has an empty input sequence", ex.user)));
            }
            if ex.target == 0 || ex.input.contains(&0) {
                return Err(Error::contract(format!("user {} uses the padding id as an item", ex.user)));
            }
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.input.len().min(max_len)).collect();
        let seq_len = lengths.iter().copied().max().unwrap_or(0);
        let mut items = vec![0; examples.len() * seq_len];
        for (b, (ex, &n)) in examples.iter().zip(&lengths).enumerate() {
            let recent = &ex.input[ex.input.len() - n..];
            items[(b + 1) * seq_len - n..(b + 1) * seq_len].copy_from_slice(recent);
        }
        Ok(Self {
            items,
            batch_size: examples.len(),
            seq_len,
            targets: examples.iter().map(|e| e.target).collect(),
            lengths,
            users: examples.iter().map(|e| e.user).collect(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.items[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// True at non-padding positions, row-major.
    pub fn token_mask(&self) -> Vec<bool> {
        self.items.iter().map(|&i| i != 0).collect()
    }

    /// The same batch with `extra` more columns of left padding.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let len = self.seq_len + extra;
        let mut items = vec![0; self.batch_size * len];
        for b in 0..self.batch_size {
            items[b * len + extra..(b + 1) * len].copy_from_slice(self.row(b));
        }
        Self {
            items,
            seq_len: len,
            ..self.clone()
        }
    }
}

/// Shuffled batches over `examples`. The order is a pure function of
/// `(seed, epoch)`; the last batch may be partial.
pub fn batch_iter(examples: &[Example], max_len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch]));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            Batch::from_examples(&rows, max_len)
        })
        .collect()
}

/// Unshuffled batches in example order, for evaluation.
pub fn sequential_batches(examples: &[Example], max_len: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    examples
        .chunks(batch_size)
        .map(|c| Batch::from_examples(c, max_len))
        .collect()
}
