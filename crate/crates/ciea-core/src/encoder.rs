//! Trainable embedding table and pre-norm transformer blocks, with
//! first-position pooling to a unit-norm representation.
//!
//! Padded positions are excluded as attention keys (large negative logit
//! bias) and zeroed in the block outputs, so appending `<pad>` tokens never
//! changes the pooled representation. Representations are L2-normalized at
//! pooling time, which makes downstream cosine ranking equal to a dot
//! product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, MASKED_LOGIT};
use crate::vocab::TokenSequence;
use crate::visual::absorb;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.max_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::contract("encoder dimensions must be positive"));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_scale: Tensor,
    pub ln1_offset: Tensor,
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_offset: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// All trainable encoder parameters: token embeddings, learned positions,
/// and per-layer attention/feed-forward/layer-norm weights.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub positional: Tensor,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let dh = config.head_dim();
        let attn_std = (2.0 / (d + dh) as f64).sqrt();
        let ffn_std = (2.0 / (d + config.ffn_dim) as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_scale: ones(d),
                ln1_offset: Tensor::zeros(vec![d]).with_grad(),
                heads: (0..config.heads)
                    .map(|_| HeadParams {
                        w_q: Tensor::randn(vec![d, dh], attn_std, rng).with_grad(),
                        w_k: Tensor::randn(vec![d, dh], attn_std, rng).with_grad(),
                        w_v: Tensor::randn(vec![d, dh], attn_std, rng).with_grad(),
                    })
                    .collect(),
                w_o: Tensor::randn(vec![d, d], (1.0 / d as f64).sqrt(), rng).with_grad(),
                ln2_scale: ones(d),
                ln2_offset: Tensor::zeros(vec![d]).with_grad(),
                w_ff1: Tensor::randn(vec![d, config.ffn_dim], ffn_std, rng).with_grad(),
                b_ff1: Tensor::zeros(vec![config.ffn_dim]).with_grad(),
                w_ff2: Tensor::randn(vec![config.ffn_dim, d], ffn_std, rng).with_grad(),
                b_ff2: Tensor::zeros(vec![d]).with_grad(),
            })
            .collect();
        Ok(EncoderParams {
            token_embedding: Tensor::randn(vec![config.vocab_size, d], 0.1, rng).with_grad(),
            positional: Tensor::randn(vec![config.max_len, d], 0.05, rng).with_grad(),
            config,
            layers,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            config: self.config.clone(),
            token_embedding: tape.leaf(&self.token_embedding),
            positional: tape.leaf(&self.positional),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    ln1_scale: tape.leaf(&l.ln1_scale),
                    ln1_offset: tape.leaf(&l.ln1_offset),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| BoundHead {
                            w_q: tape.leaf(&h.w_q),
                            w_k: tape.leaf(&h.w_k),
                            w_v: tape.leaf(&h.w_v),
                        })
                        .collect(),
                    w_o: tape.leaf(&l.w_o),
                    ln2_scale: tape.leaf(&l.ln2_scale),
                    ln2_offset: tape.leaf(&l.ln2_offset),
                    w_ff1: tape.leaf(&l.w_ff1),
                    b_ff1: tape.leaf(&l.b_ff1),
                    w_ff2: tape.leaf(&l.w_ff2),
                    b_ff2: tape.leaf(&l.b_ff2),
                })
                .collect(),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundEncoder) -> Result<()> {
        absorb(&mut self.token_embedding, tape, bound.token_embedding)?;
        absorb(&mut self.positional, tape, bound.positional)?;
        for (l, bl) in self.layers.iter_mut().zip(&bound.layers) {
            absorb(&mut l.ln1_scale, tape, bl.ln1_scale)?;
            absorb(&mut l.ln1_offset, tape, bl.ln1_offset)?;
            for (h, bh) in l.heads.iter_mut().zip(&bl.heads) {
                absorb(&mut h.w_q, tape, bh.w_q)?;
                absorb(&mut h.w_k, tape, bh.w_k)?;
                absorb(&mut h.w_v, tape, bh.w_v)?;
            }
            absorb(&mut l.w_o, tape, bl.w_o)?;
            absorb(&mut l.ln2_scale, tape, bl.ln2_scale)?;
            absorb(&mut l.ln2_offset, tape, bl.ln2_offset)?;
            absorb(&mut l.w_ff1, tape, bl.w_ff1)?;
            absorb(&mut l.b_ff1, tape, bl.b_ff1)?;
            absorb(&mut l.w_ff2, tape, bl.w_ff2)?;
            absorb(&mut l.b_ff2, tape, bl.b_ff2)?;
        }
        Ok(())
    }

    pub fn walk(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.token_embedding"), self.token_embedding.clone()));
        out.push((format!("{prefix}.positional"), self.positional.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            out.push((format!("{p}.ln1.scale"), l.ln1_scale.clone()));
            out.push((format!("{p}.ln1.offset"), l.ln1_offset.clone()));
            for (h, head) in l.heads.iter().enumerate() {
                out.push((format!("{p}.head{h}.w_q"), head.w_q.clone()));
                out.push((format!("{p}.head{h}.w_k"), head.w_k.clone()));
                out.push((format!("{p}.head{h}.w_v"), head.w_v.clone()));
            }
            out.push((format!("{p}.attn.w_o"), l.w_o.clone()));
            out.push((format!("{p}.ln2.scale"), l.ln2_scale.clone()));
            out.push((format!("{p}.ln2.offset"), l.ln2_offset.clone()));
            out.push((format!("{p}.ffn.w1"), l.w_ff1.clone()));
            out.push((format!("{p}.ffn.b1"), l.b_ff1.clone()));
            out.push((format!("{p}.ffn.w2"), l.w_ff2.clone()));
            out.push((format!("{p}.ffn.b2"), l.b_ff2.clone()));
        }
    }

    pub fn walk_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.token_embedding"), &mut self.token_embedding));
        out.push((format!("{prefix}.positional"), &mut self.positional));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}.layer{i}");
            out.push((format!("{p}.ln1.scale"), &mut l.ln1_scale));
            out.push((format!("{p}.ln1.offset"), &mut l.ln1_offset));
            for (h, head) in l.heads.iter_mut().enumerate() {
                out.push((format!("{p}.head{h}.w_q"), &mut head.w_q));
                out.push((format!("{p}.head{h}.w_k"), &mut head.w_k));
                out.push((format!("{p}.head{h}.w_v"), &mut head.w_v));
            }
            out.push((format!("{p}.attn.w_o"), &mut l.w_o));
            out.push((format!("{p}.ln2.scale"), &mut l.ln2_scale));
            out.push((format!("{p}.ln2.offset"), &mut l.ln2_offset));
            out.push((format!("{p}.ffn.w1"), &mut l.w_ff1));
            out.push((format!("{p}.ffn.b1"), &mut l.b_ff1));
            out.push((format!("{p}.ffn.w2"), &mut l.w_ff2));
            out.push((format!("{p}.ffn.b2"), &mut l.b_ff2));
        }
    }
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d]).expect("static shape").with_grad()
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_scale: Var,
    pub ln1_offset: Var,
    pub heads: Vec<BoundHead>,
    pub w_o: Var,
    pub ln2_scale: Var,
    pub ln2_offset: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

/// Encoder parameters entered on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub token_embedding: Var,
    pub positional: Var,
    pub layers: Vec<BoundLayer>,
}

// ── Forward passes ──────────────────────────────────────────────────────

/// Pure token-embedding rows (no positions); an empty sequence yields a
/// 0×d node.
pub fn token_rows(tape: &mut Tape, enc: &BoundEncoder, tokens: &TokenSequence) -> Result<Var> {
    for &id in tokens.ids() {
        if id >= enc.config.vocab_size {
            return Err(Error::contract(format!(
                "token id {id} out of range for vocabulary of size {}",
                enc.config.vocab_size
            )));
        }
    }
    tape.select_rows(enc.token_embedding, tokens.ids())
}

/// Adds learned positional rows `offset..offset+l` to `x`.
pub fn add_positions(tape: &mut Tape, enc: &BoundEncoder, x: Var, offset: usize) -> Result<Var> {
    let l = tape.shape(x)[0];
    if l == 0 {
        return Ok(x);
    }
    if offset + l > enc.config.max_len {
        return Err(Error::contract(format!(
            "sequence of length {l} at offset {offset} exceeds max_len {}",
            enc.config.max_len
        )));
    }
    let idx: Vec<usize> = (offset..offset + l).collect();
    let pos = tape.select_rows(enc.positional, &idx)?;
    tape.add(x, pos)
}

/// Token + positional embedding, row j = embedding(token_j) + position_j.
pub fn embed(tape: &mut Tape, enc: &BoundEncoder, tokens: &TokenSequence) -> Result<Var> {
    let rows = token_rows(tape, enc, tokens)?;
    add_positions(tape, enc, rows, 0)
}

/// Pre-norm transformer blocks with residuals. `pad_mask[j]` marks padded
/// positions, which are excluded as keys and zeroed in the output.
pub fn transformer(
    tape: &mut Tape,
    enc: &BoundEncoder,
    x: Var,
    pad_mask: &[bool],
) -> Result<Var> {
    let l = tape.shape(x)[0];
    if pad_mask.len() != l {
        return Err(Error::contract(format!(
            "pad mask of length {} for sequence of length {l}",
            pad_mask.len()
        )));
    }
    let has_pad = pad_mask.iter().any(|&p| p);
    let key_bias = if has_pad {
        let bias: Vec<f64> = pad_mask
            .iter()
            .map(|&p| if p { MASKED_LOGIT } else { 0.0 })
            .collect();
        Some(tape.constant(vec![l], bias)?)
    } else {
        None
    };

    let mut state = x;
    for layer in &enc.layers {
        let normed = tape.layer_norm(state, layer.ln1_scale, layer.ln1_offset, LAYER_NORM_EPS)?;
        let attn = multi_head_attention(tape, &enc.config, layer, normed, key_bias)?;
        state = tape.add(state, attn)?;

        let normed = tape.layer_norm(state, layer.ln2_scale, layer.ln2_offset, LAYER_NORM_EPS)?;
        let h = tape.matmul(normed, layer.w_ff1)?;
        let h = tape.add(h, layer.b_ff1)?;
        let h = tape.silu(h);
        let h = tape.matmul(h, layer.w_ff2)?;
        let ff = tape.add(h, layer.b_ff2)?;
        state = tape.add(state, ff)?;
    }

    if has_pad {
        let keep: Vec<f64> = pad_mask
            .iter()
            .map(|&p| if p { 0.0 } else { 1.0 })
            .collect();
        let keep_col = tape.constant(vec![l, 1], keep)?;
        state = tape.mul(state, keep_col)?;
    }
    Ok(state)
}

fn multi_head_attention(
    tape: &mut Tape,
    config: &EncoderConfig,
    layer: &BoundLayer,
    x: Var,
    key_bias: Option<Var>,
) -> Result<Var> {
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let q = tape.matmul(x, head.w_q)?;
        let k = tape.matmul(x, head.w_k)?;
        let v = tape.matmul(x, head.w_v)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(bias) = key_bias {
            logits = tape.add(logits, bias)?;
        }
        let attn = tape.softmax_rows(logits)?;
        head_outputs.push(tape.matmul(attn, v)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, layer.w_o)
}

/// First-position pooling followed by L2 normalization.
pub fn pool_first(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.shape(x)[1];
    let first = tape.select_rows(x, &[0])?;
    let vec = tape.reshape(first, vec![d])?;
    Ok(tape.normalize(vec))
}

/// Full query path: embed, transformer, pool, normalize.
pub fn encode_query(tape: &mut Tape, enc: &BoundEncoder, tokens: &TokenSequence) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::contract("cannot encode an empty query"));
    }
    let x = embed(tape, enc, tokens)?;
    let out = transformer(tape, enc, x, &vec![false; tokens.len()])?;
    pool_first(tape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_len: 12,
            vocab_size: 10,
        }
    }

    fn params(config: EncoderConfig, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::init(config, &mut rng).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), 10).unwrap()
    }

    #[test]
    fn config_requires_divisible_heads() {
        let mut c = small_config();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_with_zero_positions_is_embedding_row() {
        let mut p = params(small_config(), 1);
        p.positional = Tensor::zeros(vec![12, 8]).with_grad();
        let mut tape = Tape::new();
        let enc = p.bind(&mut tape);
        let x = embed(&mut tape, &enc, &seq(&[5])).unwrap();
        let row = &p.token_embedding.values()[5 * 8..6 * 8];
        assert_eq!(tape.value(x), row);
    }

    #[test]
    fn embed_shape_and_oov() {
        let p = params(small_config(), 1);
        let mut tape = Tape::new();
        let enc = p.bind(&mut tape);
        let x = embed(&mut tape, &enc, &seq(&[1, 2])).unwrap();
        assert_eq!(tape.shape(x), &[2, 8]);

        let bad = TokenSequence::new(vec![3], 1000).unwrap();
        assert!(embed(&mut tape, &enc, &bad).is_err());
    }

    #[test]
    fn embed_empty_sequence_is_zero_by_d() {
        let p = params(small_config(), 1);
        let mut tape = Tape::new();
        let enc = p.bind(&mut tape);
        let x = embed(&mut tape, &enc, &TokenSequence::empty()).unwrap();
        assert_eq!(tape.shape(x), &[0, 8]);
    }

    #[test]
    fn perturbing_one_embedding_row_only_moves_its_occurrences() {
        let mut p = params(small_config(), 2);
        p.positional = Tensor::zeros(vec![12, 8]).with_grad();
        let tokens = seq(&[4, 7, 4]);

        let run = |p: &EncoderParams| {
            let mut tape = Tape::new();
            let enc = p.bind(&mut tape);
            let x = embed(&mut tape, &enc, &tokens).unwrap();
            tape.value(x).to_vec()
        };
        let before = run(&p);
        p.token_embedding.values_mut()[7 * 8 + 3] += 0.5;
        let after = run(&p);
        for row in 0..3 {
            let changed = before[row * 8..(row + 1) * 8] != after[row * 8..(row + 1) * 8];
            assert_eq!(changed, tokens.ids()[row] == 7);
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut c = small_config();
        c.layers = 0;
        let p = params(c, 3);
        let mut tape = Tape::new();
        let enc = p.bind(&mut tape);
        let x = tape.constant(vec![3, 8], (0..24).map(|i| i as f64).collect()).unwrap();
        let y = transformer(&mut tape, &enc, x, &[false; 3]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn all_pad_mask_zeroes_output() {
        let p = params(small_config(), 4);
        let mut tape = Tape::new();
        let enc = p.bind(&mut tape);
        let x = tape.constant(vec![2, 8], vec![0.5; 16]).unwrap();
        let y = transformer(&mut tape, &enc, x, &[true, true]).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_equivariance_with_zero_positions() {
        let mut p = params(small_config(), 5);
        p.positional = Tensor::zeros(vec![12, 8]).with_grad();
        let run = |p: &EncoderParams, ids: &[usize]| {
            let mut tape = Tape::new();
            let enc = p.bind(&mut tape);
            let x = embed(&mut tape, &enc, &seq(ids)).unwrap();
            let y = transformer(&mut tape, &enc, x, &vec![false; ids.len()]).unwrap();
            tape.value(y).to_vec()
        };
        let a = run(&p, &[4, 6, 9]);
        let b = run(&p, &[9, 6, 4]);
        for (row_a, row_b) in [(0usize, 2usize), (1, 1), (2, 0)] {
            for j in 0..8 {
                assert!((a[row_a * 8 + j] - b[row_b * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_representation_is_unit_norm_and_deterministic() {
        let p = params(small_config(), 6);
        let encode = || {
            let mut tape = Tape::new();
            let enc = p.bind(&mut tape);
            let q = encode_query(&mut tape, &enc, &seq(&[1, 5, 2])).unwrap();
            tape.value(q).to_vec()
        };
        let a = encode();
        let b = encode();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_query_rejected() {
        let p = params(small_config(), 7);
        let mut tape = Tape::new();
        let enc = p.bind(&mut tape);
        assert!(encode_query(&mut tape, &enc, &TokenSequence::empty()).is_err());
    }

    #[test]
    fn pad_invariance_of_pooled_representation() {
        let p = params(small_config(), 8);
        let encode = |ids: &[usize], mask: &[bool]| {
            let mut tape = Tape::new();
            let enc = p.bind(&mut tape);
            let x = embed(&mut tape, &enc, &seq(ids)).unwrap();
            let y = transformer(&mut tape, &enc, x, mask).unwrap();
            let pooled = pool_first(&mut tape, y).unwrap();
            tape.value(pooled).to_vec()
        };
        let plain = encode(&[4, 6], &[false, false]);
        let padded = encode(&[4, 6, 0, 0], &[false, false, true, true]);
        for (a, b) in plain.iter().zip(&padded) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
