use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::data::{Batch, Example};
use crate::hymoe::GateStats;
use crate::nn::{Linear, ParamStore, LAYER_NORM_EPS};
use crate::rng;

fn small_config(n_layers: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(20, 8);
    cfg.set_dim(8);
    cfg.d_ff = 16;
    cfg.n_layers = n_layers;
    cfg.dropout = 0.0;
    cfg
}

/// Model with every parameter drawn at random (padding row kept at zero).
fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(cfg, seed).unwrap();
    let dist = Normal::new(0.0, 0.4).unwrap();
    let mut r = rng::stream(seed, "randomize", &[]);
    for p in m.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut r));
    }
    let d = m.config.dim;
    m.params.get_mut(m.item_embedding).data_mut()[..d].fill(0.0);
    m
}

fn random_batch(seed: u64, rows: usize, vocab: usize, max_len: usize) -> Batch {
    let mut r = rng::stream(seed, "batch", &[]);
    let examples: Vec<Example> = (0..rows)
        .map(|u| {
            let n = r.random_range(1..=max_len);
            Example {
                user: u,
                input: (0..n).map(|_| r.random_range(1..vocab)).collect(),
                target: r.random_range(1..vocab),
            }
        })
        .collect();
    Batch::from_examples(&examples, max_len).unwrap()
}

fn last_states(m: &Model, batch: &Batch, step: u64) -> Tensor {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let enc = m.encode_batch(&mut tape, &p, batch, Pass::eval(step)).unwrap();
    tape.value(enc.last).clone()
}

fn hidden_states(m: &Model, items: &[usize], batch: usize, len: usize) -> Tensor {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let enc = m.encode(&mut tape, &p, items, batch, len, Pass::eval(300)).unwrap();
    tape.value(enc.hidden).clone()
}

fn linear_oracle(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.weight).data();
    let b = store.get(lin.bias).data();
    (0..lin.out_dim)
        .map(|o| b[o] + (0..lin.in_dim).map(|i| x[i] * w[i * lin.out_dim + o]).sum::<f64>())
        .collect()
}

fn layer_norm_oracle(store: &ParamStore, ln: &crate::nn::LayerNorm, x: &[f64]) -> Vec<f64> {
    let g = store.get(ln.gamma).data();
    let b = store.get(ln.beta).data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| g[j] * (v - mean) / (var + LAYER_NORM_EPS).sqrt() + b[j])
        .collect()
}

/// Explicit per-head loops: position `i` attends to non-padding `j <= i`.
fn attention_oracle(store: &ParamStore, a: &SelfAttention, x: &Tensor, batch: usize, len: usize, mask: &[bool]) -> Vec<f64> {
    let d = a.dim;
    let dh = d / a.n_heads;
    let proj = |lin: &Linear| -> Vec<Vec<f64>> { (0..batch * len).map(|t| linear_oracle(store, lin, x.row(t))).collect() };
    let (q, k, v) = (proj(&a.query), proj(&a.key), proj(&a.value));
    let mut out = Vec::new();
    for b in 0..batch {
        for i in 0..len {
            let mut ctx = vec![0.0; d];
            for h in 0..a.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let allowed: Vec<usize> = (0..=i).filter(|&j| mask[b * len + j]).collect();
                if allowed.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        cols.clone().map(|c| q[b * len + i][c] * k[b * len + j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (s, &j) in scores.iter().zip(&allowed) {
                    let w = (s - max).exp() / z;
                    for c in cols.clone() {
                        ctx[c] += w * v[b * len + j][c];
                    }
                }
            }
            out.extend(linear_oracle(store, &a.out, &ctx));
        }
    }
    out
}

fn run_attention(m: &Model, x: &Tensor, batch: usize, len: usize, mask: &[bool]) -> Tensor {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = m.layers[0].attention.forward(&mut tape, &p, xv, batch, len, mask).unwrap();
    tape.value(y).clone()
}

// ---------------------------------------------------------------- config

#[test]
fn default_config_values() {
    let cfg = ModelConfig::new(100, 50);
    assert_eq!((cfg.n_experts, cfg.top_k, cfg.warmup_steps, cfg.lb_weight), (4, 2, 500, 0.02));
    assert_eq!((cfg.dim, cfg.d_ff, cfg.router_hidden), (64, 256, 32));
    assert_eq!((cfg.n_layers, cfg.n_heads, cfg.dropout), (2, 2, 0.2));
    cfg.validate().unwrap();
}

#[test]
fn config_validation_rejects_bad_values() {
    let bad: [fn(&mut ModelConfig); 7] = [
        |c| c.top_k = 5,
        |c| c.top_k = 0,
        |c| c.n_heads = 3,
        |c| c.lb_weight = -0.1,
        |c| c.dropout = 1.0,
        |c| c.vocab_size = 1,
        |c| c.warmup_steps = 0,
    ];
    for f in bad {
        let mut cfg = ModelConfig::new(100, 50);
        f(&mut cfg);
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
        assert!(Model::new(cfg, 0).is_err());
    }
}

#[test]
fn padding_row_starts_at_zero_and_is_pinned() {
    let m = Model::new(small_config(1), 3).unwrap();
    assert!(m.params.get(m.item_embedding).row(0).iter().all(|&v| v == 0.0));
    assert_eq!(m.params.param(m.item_embedding).zero_rows, vec![0]);
}

// ---------------------------------------------------------------- embedding

fn embed(m: &Model, items: &[usize], batch: usize, len: usize) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let h = m.embed(&mut tape, &p, items, batch, len)?;
    Ok(tape.value(h).clone())
}

#[test]
fn all_padding_embeds_to_positions_only() {
    let m = random_model(small_config(1), 1);
    let h = embed(&m, &[0; 5], 1, 5).unwrap();
    let pos = m.params.get(m.position_embedding);
    for t in 0..5 {
        assert_eq!(h.row(t), pos.row(4 - t));
    }
}

#[test]
fn single_item_with_zero_positions_is_a_table_row() {
    let mut m = random_model(small_config(1), 2);
    m.params.get_mut(m.position_embedding).data_mut().fill(0.0);
    let h = embed(&m, &[7], 1, 1).unwrap();
    assert_eq!(h.row(0), m.params.get(m.item_embedding).row(7));
}

#[test]
fn embedding_matches_lookup_loop() {
    let m = random_model(small_config(1), 3);
    let batch = random_batch(3, 4, 20, 8);
    let h = embed(&m, &batch.items, 4, batch.seq_len).unwrap();
    let (table, pos) = (m.params.get(m.item_embedding), m.params.get(m.position_embedding));
    let l = batch.seq_len;
    for (t, &id) in batch.items.iter().enumerate() {
        for j in 0..8 {
            assert_eq!(h.row(t)[j], table.row(id)[j] + pos.row(l - 1 - t % l)[j]);
        }
    }
}

#[test]
fn embedding_rejects_out_of_range_ids() {
    let m = random_model(small_config(1), 4);
    assert!(matches!(embed(&m, &[3, 20], 1, 2), Err(crate::Error::Contract(_))));
    assert!(embed(&m, &[1; 9], 1, 9).is_err());
}

// ---------------------------------------------------------------- attention

#[test]
fn single_token_attention_is_the_value_path() {
    let m = random_model(small_config(1), 5);
    let mut r = rng::stream(5, "x", &[]);
    let x = Tensor::from_fn(&[1, 8], |_| r.random_range(-1.0..1.0));
    let y = run_attention(&m, &x, 1, 1, &[true]);
    let a = &m.layers[0].attention;
    let want = linear_oracle(&m.params, &a.out, &linear_oracle(&m.params, &a.value, x.row(0)));
    for (g, w) in y.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn constant_scores_average_the_causal_prefix() {
    let mut m = random_model(small_config(1), 6);
    let a = m.layers[0].attention.clone();
    for id in [a.query.weight, a.query.bias, a.key.weight, a.key.bias] {
        m.params.get_mut(id).data_mut().fill(0.0);
    }
    let mut r = rng::stream(6, "x", &[]);
    let x = Tensor::from_fn(&[5, 8], |_| r.random_range(-1.0..1.0));
    let y = run_attention(&m, &x, 1, 5, &[true; 5]);
    let values: Vec<Vec<f64>> = (0..5).map(|t| linear_oracle(&m.params, &a.value, x.row(t))).collect();
    for i in 0..5 {
        let mean: Vec<f64> = (0..8).map(|c| (0..=i).map(|j| values[j][c]).sum::<f64>() / (i + 1) as f64).collect();
        let want = linear_oracle(&m.params, &a.out, &mean);
        for (g, w) in y.row(i).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_per_head_loop_oracle() {
    for seed in 0..5 {
        let m = random_model(small_config(1), seed);
        let (batch, len) = (3, 6);
        let mut r = rng::stream(seed, "x", &[]);
        let x = Tensor::from_fn(&[batch * len, 8], |_| r.random_range(-1.0..1.0));
        let mask: Vec<bool> = (0..batch * len).map(|t| t % len >= t / len).collect();
        let y = run_attention(&m, &x, batch, len, &mask);
        let want = attention_oracle(&m.params, &m.layers[0].attention, &x, batch, len, &mask);
        for (g, w) in y.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_shape_mismatch() {
    let m = random_model(small_config(1), 7);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[6, 8]));
    let r = m.layers[0].attention.forward(&mut tape, &p, x, 2, 4, &[true; 8]);
    assert!(matches!(r, Err(crate::Error::Shape { .. })));
}

#[test]
fn causal_mask_layout() {
    let m = causal_mask(&[false, true, true], 1, 3);
    let want = [
        false, false, false, //
        false, true, false, //
        false, true, true,
    ];
    assert_eq!(m, want);
}

// ---------------------------------------------------------------- encoder

#[test]
fn zero_layers_returns_embedded_last_token() {
    let m = random_model(small_config(0), 8);
    let batch = random_batch(8, 3, 20, 8);
    let y = last_states(&m, &batch, 0);
    let h = embed(&m, &batch.items, 3, batch.seq_len).unwrap();
    for b in 0..3 {
        assert_eq!(y.row(b), h.row(b * batch.seq_len + batch.seq_len - 1));
    }
}

#[test]
fn step_zero_matches_uniform_baseline() {
    let cfg = small_config(2);
    let mut base_cfg = cfg.clone();
    base_cfg.uniform_pffn = true;
    for seed in 0..5 {
        let hy = random_model(cfg.clone(), seed);
        let mut base = Model::new(base_cfg.clone(), seed).unwrap();
        // copy every shared parameter over by name
        for id in base.params.ids().collect::<Vec<_>>() {
            let src = hy.params.find(base.params.name(id)).unwrap();
            *base.params.get_mut(id) = hy.params.get(src).clone();
        }
        let batch = random_batch(seed, 5, 20, 8);
        assert_eq!(last_states(&hy, &batch, 0), last_states(&base, &batch, 0));
    }
}

#[test]
fn default_init_shares_parameters_with_uniform_baseline() {
    let cfg = small_config(2);
    let mut base_cfg = cfg.clone();
    base_cfg.uniform_pffn = true;
    let hy = Model::new(cfg, 11).unwrap();
    let base = Model::new(base_cfg, 11).unwrap();
    for p in base.params.iter() {
        let id = hy.params.find(&p.name).unwrap();
        assert_eq!(hy.params.get(id), &p.value, "{}", p.name);
    }
}

#[test]
fn encoder_matches_composed_oracle_pipeline() {
    let m = random_model(small_config(1), 9);
    let batch = random_batch(9, 3, 20, 6);
    let (b, l) = (batch.batch_size, batch.seq_len);
    let step = 300;
    let got = hidden_states(&m, &batch.items, b, l);

    let layer = &m.layers[0];
    let mask = batch.token_mask();
    let x = embed(&m, &batch.items, b, l).unwrap();
    let att = attention_oracle(&m.params, &layer.attention, &x, b, l, &mask);
    let h1: Vec<f64> = (0..b * l)
        .flat_map(|t| {
            let s: Vec<f64> = (0..8).map(|j| x.row(t)[j] + att[t * 8 + j]).collect();
            layer_norm_oracle(&m.params, &layer.attention_norm, &s)
        })
        .collect();
    let h1 = Tensor::new(vec![b * l, 8], h1).unwrap();
    let FeedForwardLayer::Hybrid(block) = &layer.ffn else { unreachable!() };
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let hv = tape.constant(h1.clone());
    let f = block.forward(&mut tape, &p, hv, &mask, step).unwrap();
    let f = tape.value(f.output).clone();
    for t in 0..b * l {
        let s: Vec<f64> = (0..8).map(|j| h1.row(t)[j] + f.row(t)[j]).collect();
        let want = layer_norm_oracle(&m.params, &layer.ffn_norm, &s);
        for (g, w) in got.row(t).iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }
}

#[test]
fn later_positions_never_affect_earlier_ones() {
    let m = random_model(small_config(2), 10);
    let mut r = rng::stream(10, "seq", &[]);
    for _ in 0..5 {
        let items: Vec<usize> = (0..8).map(|_| r.random_range(1..20)).collect();
        let base = hidden_states(&m, &items, 1, 8);
        let cut = r.random_range(0..7);
        let mut changed = items.clone();
        for v in &mut changed[cut + 1..] {
            *v = (*v % 19) + 1;
        }
        let moved = hidden_states(&m, &changed, 1, 8);
        for t in 0..=cut {
            assert_eq!(base.row(t), moved.row(t));
        }
    }
}

#[test]
fn extra_left_padding_changes_nothing() {
    let m = random_model(small_config(2), 12);
    for seed in 0..5 {
        let batch = random_batch(seed, 4, 20, 5);
        let padded = batch.with_extra_padding(3);
        assert_eq!(last_states(&m, &batch, 400), last_states(&m, &padded, 400));
        let loss = |bt: &Batch| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape, false);
            m.loss(&mut tape, &p, bt, Pass::eval(400)).unwrap().1
        };
        assert_eq!(loss(&batch), loss(&padded));
    }
}

// ---------------------------------------------------------------- scoring and loss

fn score(m: &Model, y: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let yv = tape.constant(y);
    let s = m.score(&mut tape, &p, yv).unwrap();
    tape.value(s).clone()
}

#[test]
fn zero_representation_scores_zero() {
    let m = random_model(small_config(1), 13);
    assert_eq!(score(&m, Tensor::zeros(&[2, 8])), Tensor::zeros(&[2, 20]));
}

#[test]
fn orthonormal_table_scores_one_hot() {
    let mut cfg = small_config(1);
    cfg.vocab_size = 8;
    let mut m = random_model(cfg, 14);
    // rows 1..8 are the unit vectors e_0..e_6
    *m.params.get_mut(m.item_embedding) = Tensor::from_fn(&[8, 8], |i| if i >= 8 && i / 8 - 1 == i % 8 { 1.0 } else { 0.0 });
    let y = Tensor::new(vec![1, 8], m.params.get(m.item_embedding).row(5).to_vec()).unwrap();
    let s = score(&m, y);
    let want: Vec<f64> = (0..8).map(|j| if j == 5 { 1.0 } else { 0.0 }).collect();
    assert_eq!(s.data(), &want[..]);
}

#[test]
fn scores_match_dot_product_loop() {
    let m = random_model(small_config(1), 15);
    let mut r = rng::stream(15, "y", &[]);
    let y = Tensor::from_fn(&[3, 8], |_| r.random_range(-1.0..1.0));
    let s = score(&m, y.clone());
    let table = m.params.get(m.item_embedding);
    for b in 0..3 {
        for j in 0..20 {
            let want: f64 = (0..8).map(|c| y.row(b)[c] * table.row(j)[c]).sum();
            assert!((s.row(b)[j] - want).abs() < 1e-12);
        }
    }
}

fn ce(logits: Vec<f64>, width: usize, targets: &[usize]) -> crate::Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![targets.len(), width], logits)?);
    let v = cross_entropy(&mut tape, l, targets)?;
    Ok(tape.value(v).item())
}

#[test]
fn cross_entropy_examples() {
    // column 0 is padding and ignored, so width = items + 1
    let uniform = ce(vec![0.0; 101], 101, &[17]).unwrap();
    assert!((uniform - 100f64.ln()).abs() < 1e-12);
    assert!((uniform - 4.60517).abs() < 1e-5);

    let mut peaked = vec![0.0; 101];
    peaked[1] = 10.0;
    let v = ce(peaked, 101, &[1]).unwrap();
    let want = (1.0 + 99.0 * (-10f64).exp()).ln();
    assert!((v - want).abs() < 1e-12);
    assert!((v - 0.0044845225).abs() < 1e-10);

    let pair = ce(vec![123.0, 0.5, 0.5], 3, &[2]).unwrap();
    assert!((pair - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_rejects_padding_target() {
    assert!(matches!(ce(vec![0.0; 4], 4, &[0]), Err(crate::Error::Contract(_))));
    assert!(ce(vec![0.0; 4], 4, &[4]).is_err());
}

#[test]
fn cross_entropy_is_non_negative_and_averages_rows() {
    let mut r = rng::stream(16, "ce", &[]);
    let logits: Vec<f64> = (0..3 * 6).map(|_| r.random_range(-3.0..3.0)).collect();
    let targets = [1, 4, 5];
    let all = ce(logits.clone(), 6, &targets).unwrap();
    let rows: f64 = (0..3)
        .map(|b| ce(logits[b * 6..(b + 1) * 6].to_vec(), 6, &targets[b..b + 1]).unwrap())
        .sum();
    assert!(all >= 0.0);
    assert!((all - rows / 3.0).abs() < 1e-12);
}

fn stats(tape: &mut Tape, g: &[f64]) -> GateStats {
    GateStats {
        mean_gate: tape.constant(Tensor::vector(g.to_vec())),
        token_count: 1,
    }
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::scalar(1.0));
    let uniform = stats(&mut tape, &[0.25; 4]);
    let onehot = stats(&mut tape, &[0.0, 1.0, 0.0, 0.0]);

    let (_, b) = total_loss(&mut tape, one, &[uniform], 0.02).unwrap();
    assert!((b.total - 0.972274).abs() < 1e-6);
    assert!((b.total - (1.0 - 0.02 * 4f64.ln())).abs() < 1e-12);

    let (_, b) = total_loss(&mut tape, one, &[uniform], 0.0).unwrap();
    assert_eq!(b.total, 1.0);

    let (_, b) = total_loss(&mut tape, one, &[uniform, onehot], 0.02).unwrap();
    assert_eq!(b.layer_lb.len(), 2);
    assert_eq!(b.layer_lb[1], 0.0);
    assert!((b.total - (1.0 - 0.02 * 4f64.ln())).abs() < 1e-12);

    assert!(total_loss(&mut tape, one, &[], -1.0).is_err());
}

#[test]
fn loss_decomposes_exactly() {
    for seed in 0..5 {
        let mut cfg = small_config(2);
        cfg.lb_weight = 0.3;
        let m = random_model(cfg, seed);
        let batch = random_batch(seed, 6, 20, 8);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let (_, b, _) = m.loss(&mut tape, &p, &batch, Pass::eval(200)).unwrap();
        assert_eq!(b.layer_lb.len(), 2);
        assert!((b.total - (b.ce + 0.3 * b.layer_lb.iter().sum::<f64>())).abs() < 1e-12);
        assert!(b.ce >= 0.0);
    }
}

#[test]
fn uniform_baseline_equals_hybrid_without_sparse_branch() {
    let mut hy_cfg = small_config(2);
    hy_cfg.force_alpha_zero = true;
    hy_cfg.lb_weight = 0.0;
    let mut base_cfg = small_config(2);
    base_cfg.uniform_pffn = true;
    let hy = Model::new(hy_cfg, 21).unwrap();
    let base = Model::new(base_cfg, 21).unwrap();
    let batch = random_batch(21, 5, 20, 8);
    assert_eq!(last_states(&hy, &batch, 5000), last_states(&base, &batch, 5000));

    let loss = |m: &Model| {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        m.loss(&mut tape, &p, &batch, Pass::eval(5000)).unwrap().1
    };
    let (a, b) = (loss(&hy), loss(&base));
    assert_eq!(a.total, b.total);
    assert!(b.layer_lb.is_empty() && b.lb == 0.0);
}

#[test]
fn frozen_alpha_is_not_trainable() {
    let mut cfg = small_config(2);
    cfg.freeze_alpha = true;
    let m = Model::new(cfg, 0).unwrap();
    for block in m.hybrid_blocks() {
        assert!(!m.params.param(block.aef.alpha_param).trainable);
    }
}

#[test]
fn per_position_supervises_every_real_token() {
    let mut cfg = small_config(1);
    cfg.per_position = true;
    let m = random_model(cfg, 22);
    let batch = Batch::from_examples(
        &[Example {
            user: 0,
            input: vec![3, 4],
            target: 5,
        }],
        8,
    )
    .unwrap();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let (_, b, enc) = m.loss(&mut tape, &p, &batch, Pass::eval(0)).unwrap();

    let logits = m.score(&mut tape, &p, enc.hidden).unwrap();
    let want = cross_entropy(&mut tape, logits, &[4, 5]).unwrap();
    assert_eq!(b.ce, tape.value(want).item());
}

#[test]
fn dropout_is_a_function_of_seed_and_step() {
    let mut cfg = small_config(2);
    cfg.dropout = 0.3;
    let m = random_model(cfg, 23);
    let batch = random_batch(23, 4, 20, 8);
    let run = |pass: Pass| {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        m.loss(&mut tape, &p, &batch, pass).unwrap().1.total
    };
    assert_eq!(run(Pass::train(7, 1)), run(Pass::train(7, 1)));
    assert_ne!(run(Pass::train(7, 1)), run(Pass::train(8, 1)));
    assert_ne!(run(Pass::train(7, 1)), run(Pass::eval(7)));
}
