use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, Linear, ParamStore};

/// Multi-head scaled dot-product self-attention with a causal and
/// key-padding mask.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

/// `allowed[b, i, j]`: query `i` of row `b` may attend to key `j`.
pub fn causal_mask(token_mask: &[bool], batch: usize, len: usize) -> Vec<bool> {
    let mut allowed = vec![false; batch * len * len];
    for b in 0..batch {
        for i in 0..len {
            for j in 0..=i {
                allowed[(b * len + i) * len + j] = token_mask[b * len + j];
            }
        }
    }
    allowed
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, seed: u64) -> Self {
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), dim, dim, seed);
        Self {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            out: lin("out"),
            n_heads,
            dim,
        }
    }

    /// `[B*L, D]` to `[B*H, L, dh]`.
    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.n_heads, self.dim / self.n_heads);
        let x = tape.reshape(x, vec![batch, len, h, dh])?;
        let x = tape.permute(x, vec![0, 2, 1, 3])?;
        tape.reshape(x, vec![batch * h, len, dh])
    }

    /// Attention over `h: [B*L, D]` laid out row-major by sequence.
    /// `token_mask` marks non-padding positions. Returns the output
    /// projection of the attended values (no residual).
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, h: Var, batch: usize, len: usize, token_mask: &[bool]) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        if shape != [batch * len, self.dim] || token_mask.len() != batch * len {
            return Err(Error::Shape {
                op: "self_attention",
                lhs: shape,
                rhs: vec![batch, len, self.dim],
            });
        }
        let nh = self.n_heads;
        let dh = self.dim / nh;
        let q = self.query.forward(tape, p, h)?;
        let k = self.key.forward(tape, p, h)?;
        let v = self.value.forward(tape, p, h)?;
        let q = self.split_heads(tape, q, batch, len)?;
        let k = self.split_heads(tape, k, batch, len)?;
        let v = self.split_heads(tape, v, batch, len)?;

        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let per_row = causal_mask(token_mask, batch, len);
        let mut mask = Vec::with_capacity(batch * nh * len * len);
        for b in 0..batch {
            let block = &per_row[b * len * len..(b + 1) * len * len];
            for _ in 0..nh {
                mask.extend_from_slice(block);
            }
        }
        let weights = tape.softmax(scores, Some(mask))?;
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.reshape(ctx, vec![batch, nh, len, dh])?;
        let ctx = tape.permute(ctx, vec![0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![batch * len, self.dim])?;
        self.out.forward(tape, p, ctx)
    }
}
