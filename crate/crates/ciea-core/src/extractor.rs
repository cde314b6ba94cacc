//! Complementary-information extractor: patch-level difference measurement
//! against the document's text and difference-re-weighted self-attention
//! over the image patches.
//!
//! For patch j, the difference measurement is r_j = −max over text tokens of
//! cos(patch_j, token_c); the weight w_j = (1+r_j)/2 lies in [0,1]. A patch
//! well covered by the text gets w near 0, a patch carrying information the
//! text lacks gets w near 1. The attention logits (QKᵀ) have each key column
//! j multiplied by w_j before the 1/√d scaling and row softmax, so
//! text-redundant patches contribute near-neutral logits rather than being
//! hard-removed. At w ≡ 1 this is exactly standard scaled dot-product
//! self-attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::visual::absorb;

/// How patch weights are derived from the difference measurement.
///
/// `Dissimilar` is the default (w = (1+r)/2, emphasizing patches unlike the
/// text); `Similar` inverts it (w = (1−r)/2); `Uniform` forces w ≡ 1, which
/// disables the re-weighting and leaves plain self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    Dissimilar,
    Similar,
    Uniform,
}

impl Default for WeightsMode {
    fn default() -> Self {
        WeightsMode::Dissimilar
    }
}

impl std::str::FromStr for WeightsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dissimilar" => Ok(WeightsMode::Dissimilar),
            "similar" => Ok(WeightsMode::Similar),
            "uniform" => Ok(WeightsMode::Uniform),
            other => Err(Error::contract(format!(
                "unknown weights_mode {other:?} (expected dissimilar|similar|uniform)"
            ))),
        }
    }
}

/// Signed per-patch differences and their normalized weights, plus the tape
/// node carrying the weights so gradients flow back through the cosines.
#[derive(Debug, Clone)]
pub struct DifferenceWeights {
    pub r: Vec<f64>,
    pub w: Vec<f64>,
    pub var: Var,
}

/// Single-head re-weighting attention parameters.
#[derive(Debug, Clone)]
pub struct ExtractorParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl ExtractorParams {
    pub fn init(d: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        ExtractorParams {
            w_q: Tensor::randn(vec![d, d], std, rng).with_grad(),
            w_k: Tensor::randn(vec![d, d], std, rng).with_grad(),
            w_v: Tensor::randn(vec![d, d], std, rng).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundExtractor {
        BoundExtractor {
            w_q: tape.leaf(&self.w_q),
            w_k: tape.leaf(&self.w_k),
            w_v: tape.leaf(&self.w_v),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundExtractor) -> Result<()> {
        absorb(&mut self.w_q, tape, bound.w_q)?;
        absorb(&mut self.w_k, tape, bound.w_k)?;
        absorb(&mut self.w_v, tape, bound.w_v)
    }

    pub fn walk(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
    }

    pub fn walk_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w_q"), &mut self.w_q));
        out.push((format!("{prefix}.w_k"), &mut self.w_k));
        out.push((format!("{prefix}.w_v"), &mut self.w_v));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundExtractor {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Per-patch difference weights against the document text embeddings.
///
/// With no text tokens (or `Uniform` mode) every weight is 1: an image with
/// no caption is entirely complementary. Ties in the per-patch maximum
/// route the subgradient to the lowest token index.
pub fn patch_differences(
    tape: &mut Tape,
    img_emb: Var,
    text_emb: Option<Var>,
    mode: WeightsMode,
) -> Result<DifferenceWeights> {
    let img_shape = tape.shape(img_emb).to_vec();
    if img_shape.len() != 2 || img_shape[0] == 0 {
        return Err(Error::contract(format!(
            "patch embeddings must be a non-empty 2-D matrix, got {img_shape:?}"
        )));
    }
    let (l_i, d) = (img_shape[0], img_shape[1]);

    let text_tokens = match text_emb {
        Some(t) if mode != WeightsMode::Uniform => {
            let ts = tape.shape(t).to_vec();
            if ts.len() != 2 || ts[1] != d {
                return Err(Error::Dimension {
                    op: "patch_differences",
                    lhs: img_shape,
                    rhs: ts,
                });
            }
            if ts[0] == 0 {
                None
            } else {
                Some((t, ts[0]))
            }
        }
        _ => None,
    };

    let Some((text, l_t)) = text_tokens else {
        let var = tape.constant(vec![l_i], vec![1.0; l_i])?;
        return Ok(DifferenceWeights {
            r: vec![1.0; l_i],
            w: vec![1.0; l_i],
            var,
        });
    };

    let token_vecs: Vec<Var> = (0..l_t)
        .map(|c| {
            let row = tape.select_rows(text, &[c])?;
            tape.reshape(row, vec![d])
        })
        .collect::<Result<_>>()?;

    let mut r = Vec::with_capacity(l_i);
    let mut w = Vec::with_capacity(l_i);
    let mut w_vars = Vec::with_capacity(l_i);
    for j in 0..l_i {
        let patch_row = tape.select_rows(img_emb, &[j])?;
        let patch = tape.reshape(patch_row, vec![d])?;
        let cosines: Vec<Var> = token_vecs
            .iter()
            .map(|&t| tape.cosine(patch, t))
            .collect::<Result<_>>()?;
        let max_cos = tape.max_many(&cosines)?;
        // w = (1 ± r)/2 with r = −max_cos.
        let slope = match mode {
            WeightsMode::Dissimilar => -0.5,
            WeightsMode::Similar => 0.5,
            WeightsMode::Uniform => unreachable!("uniform handled above"),
        };
        let scaled = tape.scale(max_cos, slope);
        let w_j = tape.add_const(scaled, 0.5);
        r.push(-tape.value_scalar(max_cos));
        w.push(tape.value_scalar(w_j));
        w_vars.push(w_j);
    }
    let var = tape.stack_scalars(&w_vars)?;
    Ok(DifferenceWeights { r, w, var })
}

/// Difference-re-weighted single-head self-attention over patch embeddings:
/// softmax((QKᵀ ⊙ w) / √d) V, with w broadcast over the key axis.
pub fn reweighted_attention(
    tape: &mut Tape,
    img_emb: Var,
    weights: &DifferenceWeights,
    params: &BoundExtractor,
) -> Result<Var> {
    let shape = tape.shape(img_emb).to_vec();
    let (l_i, d) = (shape[0], shape[1]);
    if tape.shape(weights.var) != [l_i] {
        return Err(Error::Dimension {
            op: "reweighted_attention",
            lhs: shape,
            rhs: tape.shape(weights.var).to_vec(),
        });
    }
    let q = tape.matmul(img_emb, params.w_q)?;
    let k = tape.matmul(img_emb, params.w_k)?;
    let v = tape.matmul(img_emb, params.w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let weighted = tape.mul(logits, weights.var)?;
    let scaled = tape.scale(weighted, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled)?;
    tape.matmul(attn, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(tape: &mut Tape, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        tape.constant(vec![rows, cols], values).unwrap()
    }

    #[test]
    fn anchor_cases_for_weights() {
        let mut tape = Tape::new();
        // Three patches vs one text token [1,0]:
        //   patch 0 = 2·token (redundant), patch 1 orthogonal, patch 2 anti-parallel.
        let img = constant(&mut tape, 3, 2, vec![2.0, 0.0, 0.0, 1.0, -3.0, 0.0]);
        let text = constant(&mut tape, 1, 2, vec![1.0, 0.0]);
        let dw = patch_differences(&mut tape, img, Some(text), WeightsMode::Dissimilar).unwrap();
        assert!((dw.r[0] + 1.0).abs() < 1e-12 && dw.w[0].abs() < 1e-12);
        assert!(dw.r[1].abs() < 1e-12 && (dw.w[1] - 0.5).abs() < 1e-12);
        assert!((dw.r[2] - 1.0).abs() < 1e-12 && (dw.w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_pairwise_oracle() {
        // r_j must equal the brute-force −max over all (patch, token) cosines.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let rand_vals = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let img_vals = rand_vals(&mut rng, 3 * 4);
        let text_vals = rand_vals(&mut rng, 4 * 4);

        let mut tape = Tape::new();
        let img = constant(&mut tape, 3, 4, img_vals.clone());
        let text = constant(&mut tape, 4, 4, text_vals.clone());
        let dw = patch_differences(&mut tape, img, Some(text), WeightsMode::Dissimilar).unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        for j in 0..3 {
            let patch = &img_vals[j * 4..(j + 1) * 4];
            let max = (0..4)
                .map(|c| cos(patch, &text_vals[c * 4..(c + 1) * 4]))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((dw.r[j] + max).abs() < 1e-12);
            assert!((dw.w[j] - (1.0 - max) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_text_means_everything_complementary() {
        let mut tape = Tape::new();
        let img = constant(&mut tape, 2, 3, vec![0.1; 6]);
        let dw = patch_differences(&mut tape, img, None, WeightsMode::Dissimilar).unwrap();
        assert_eq!(dw.w, vec![1.0, 1.0]);
    }

    #[test]
    fn similar_mode_flips_the_weight() {
        let mut tape = Tape::new();
        let img = constant(&mut tape, 1, 2, vec![1.0, 0.0]);
        let text = constant(&mut tape, 1, 2, vec![1.0, 0.0]);
        let dw = patch_differences(&mut tape, img, Some(text), WeightsMode::Similar).unwrap();
        // Redundant patch: max cos = 1 → r = −1 → similar weight (1−r)/2 = 1.
        assert!((dw.w[0] - 1.0).abs() < 1e-12);
        assert!((dw.r[0] + 1.0).abs() < 1e-12);
    }

    /// Reference standard attention used by the neutrality check.
    fn reference_attention(img: &[f64], l: usize, d: usize, p: &ExtractorParams) -> Vec<f64> {
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for t in 0..k {
                        c[i * n + j] += a[i * k + t] * b[t * n + j];
                    }
                }
            }
            c
        };
        let q = mm(img, p.w_q.values(), l, d, d);
        let k = mm(img, p.w_k.values(), l, d, d);
        let v = mm(img, p.w_v.values(), l, d, d);
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            let mut logits = vec![0.0; l];
            for j in 0..l {
                for t in 0..d {
                    logits[j] += q[i * d + t] * k[j * d + t];
                }
                logits[j] /= (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..l {
                for t in 0..d {
                    out[i * d + t] += exps[j] / sum * v[j * d + t];
                }
            }
        }
        out
    }

    #[test]
    fn neutral_weights_reduce_to_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = ExtractorParams::init(4, &mut rng);
        let img_vals: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let img = constant(&mut tape, 5, 4, img_vals.clone());
        let dw = patch_differences(&mut tape, img, None, WeightsMode::Uniform).unwrap();
        let bound = params.bind(&mut tape);
        let out = reweighted_attention(&mut tape, img, &dw, &bound).unwrap();

        let reference = reference_attention(&img_vals, 5, 4, &params);
        for (a, b) in tape.value(out).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_patch_output_is_its_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = ExtractorParams::init(3, &mut rng);
        let mut tape = Tape::new();
        let img = constant(&mut tape, 1, 3, vec![0.4, -0.2, 0.9]);
        let dw = patch_differences(&mut tape, img, None, WeightsMode::Dissimilar).unwrap();
        let bound = params.bind(&mut tape);
        let out = reweighted_attention(&mut tape, img, &dw, &bound).unwrap();
        let v = tape.matmul(img, bound.w_v).unwrap();
        for (a, b) in tape.value(out).iter().zip(tape.value(v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_patch_closed_form_oracle_with_zeroed_column() {
        // w = [1, 0]: the second key column of the logit matrix is zeroed
        // before softmax. Verify against a hand-rolled computation.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = ExtractorParams::init(2, &mut rng);
        let img_vals = vec![0.8, -0.3, 0.1, 0.6];

        let mut tape = Tape::new();
        let img = constant(&mut tape, 2, 2, img_vals.clone());
        let w_var = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        let dw = DifferenceWeights {
            r: vec![1.0, -1.0],
            w: vec![1.0, 0.0],
            var: w_var,
        };
        let bound = params.bind(&mut tape);
        let out = reweighted_attention(&mut tape, img, &dw, &bound).unwrap();

        let mm2 = |a: &[f64], b: &[f64]| {
            let mut c = vec![0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    for t in 0..2 {
                        c[i * 2 + j] += a[i * 2 + t] * b[t * 2 + j];
                    }
                }
            }
            c
        };
        let q = mm2(&img_vals, params.w_q.values());
        let k = mm2(&img_vals, params.w_k.values());
        let v = mm2(&img_vals, params.w_v.values());
        let mut expected = vec![0.0; 4];
        let scale = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            let raw0 = (q[i * 2] * k[0] + q[i * 2 + 1] * k[1]) * 1.0 * scale;
            let raw1 = 0.0; // killed by w_1 = 0 before scaling
            let m = raw0.max(raw1);
            let (e0, e1) = ((raw0 - m).exp(), (raw1 - m).exp());
            let z = e0 + e1;
            for t in 0..2 {
                expected[i * 2 + t] = e0 / z * v[t] + e1 / z * v[2 + t];
            }
        }
        for (a, b) in tape.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_reach_extractor_and_upstream_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let params = ExtractorParams::init(3, &mut rng);
        let img_t = Tensor::randn(vec![4, 3], 1.0, &mut rng).with_grad();
        let text_t = Tensor::randn(vec![2, 3], 1.0, &mut rng).with_grad();

        let mut tape = Tape::new();
        let img = tape.leaf(&img_t);
        let text = tape.leaf(&text_t);
        let dw = patch_differences(&mut tape, img, Some(text), WeightsMode::Dissimilar).unwrap();
        let bound = params.bind(&mut tape);
        let out = reweighted_attention(&mut tape, img, &dw, &bound).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();

        for var in [bound.w_q, bound.w_k, bound.w_v, img, text] {
            let grad = tape.grad(var).expect("gradient must be present");
            assert!(grad.iter().any(|&g| g != 0.0));
        }
    }

    proptest! {
        /// w stays in [0,1] and is invariant to positive rescaling of any
        /// patch or token row.
        #[test]
        fn weight_bounds_and_scale_invariance(
            img in proptest::collection::vec(-2.0f64..2.0, 6),
            text in proptest::collection::vec(-2.0f64..2.0, 4),
            scale in 0.05f64..20.0,
        ) {
            let mut tape = Tape::new();
            let i = tape.constant(vec![3, 2], img.clone()).unwrap();
            let t = tape.constant(vec![2, 2], text.clone()).unwrap();
            let dw = patch_differences(&mut tape, i, Some(t), WeightsMode::Dissimilar).unwrap();
            for &w in &dw.w {
                prop_assert!((0.0..=1.0).contains(&w));
            }

            let mut scaled_img = img.clone();
            for v in &mut scaled_img[0..2] {
                *v *= scale;
            }
            let mut tape2 = Tape::new();
            let i2 = tape2.constant(vec![3, 2], scaled_img).unwrap();
            let t2 = tape2.constant(vec![2, 2], text).unwrap();
            let dw2 = patch_differences(&mut tape2, i2, Some(t2), WeightsMode::Dissimilar).unwrap();
            for (a, b) in dw.w.iter().zip(&dw2.w) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
