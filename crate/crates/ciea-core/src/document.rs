//! Document encoding: fusion of re-weighted patch embeddings and text
//! embeddings into a single unit-norm representation, plus the image-only
//! representation used by the complementary loss.
//!
//! A multimodal document becomes the sequence
//! `[<start>, patch rows, <end>, text rows]`; positions are added across
//! the whole fused sequence and the result goes through the shared
//! transformer with first-position pooling. Text-only documents skip the
//! image segment entirely, so they match the plain text-encoder path. The
//! image-only representation runs the re-weighted patch rows alone through
//! the transformer, without the special tokens.
//!
//! The difference measurement compares projected patches against the pure
//! token-embedding rows of the document text (no positions): the embedding
//! layer's output, before any positional information.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    add_positions, pool_first, token_rows, transformer, BoundEncoder, EncoderConfig,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::extractor::{
    patch_differences, reweighted_attention, BoundExtractor, ExtractorParams, WeightsMode,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{TokenSequence, END_ID, START_ID};
use crate::visual::{project, BoundProjector, FrozenVisualParams, PatchGrid, Projector};

/// Which encoding path produced a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprSource {
    Multimodal,
    TextOnly,
    ImageOnly,
    Query,
    MaskedQuery,
}

/// Pooled unit-norm embedding of a query, document, or image-only document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentRepresentation {
    pub vector: Vec<f64>,
    pub source: ReprSource,
}

impl DocumentRepresentation {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Model-level configuration: encoder shape plus the visual pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_clip: usize,
    pub raw_patch_dim: usize,
    pub frozen_seed: u64,
    pub weights_mode: WeightsMode,
    pub max_text_len: usize,
}

impl ModelConfig {
    /// Positional table size needed to cover the longest fused sequence:
    /// `<start>` + patches + `<end>` + text.
    pub fn fused_max_len(max_text_len: usize, patch_count: usize) -> usize {
        max_text_len + patch_count + 2
    }
}

/// All trainable parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub projector: Projector,
    pub extractor: ExtractorParams,
}

impl ModelParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape),
            projector: self.projector.bind(tape),
            extractor: self.extractor.bind(tape),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundModel) -> Result<()> {
        self.encoder.absorb_grads(tape, &bound.encoder)?;
        self.projector.absorb_grads(tape, &bound.projector)?;
        self.extractor.absorb_grads(tape, &bound.extractor)
    }

    /// Named snapshot of every parameter, in a stable order.
    pub fn walk(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.walk("encoder", &mut out);
        self.projector.walk("projector", &mut out);
        self.extractor.walk("extractor", &mut out);
        out
    }

    /// Mutable named view over every parameter, same order as `walk`.
    pub fn walk_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.walk_mut("encoder", &mut out);
        self.projector.walk_mut("projector", &mut out);
        self.extractor.walk_mut("extractor", &mut out);
        out
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.walk_mut() {
            t.clear_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub projector: BoundProjector,
    pub extractor: BoundExtractor,
}

/// Model bundle: configuration, trainable parameters, frozen featurizer.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub frozen: FrozenVisualParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.encoder.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(config.encoder.clone(), &mut rng)?;
        let projector = Projector::init(config.d_clip, config.encoder.hidden_dim, &mut rng);
        let extractor = ExtractorParams::init(config.encoder.hidden_dim, &mut rng);
        let frozen = FrozenVisualParams::from_seed(config.raw_patch_dim, config.d_clip, config.frozen_seed);
        Ok(Model {
            config,
            params: ModelParams {
                encoder,
                projector,
                extractor,
            },
            frozen,
        })
    }

    pub fn encode_query(&self, tokens: &TokenSequence) -> Result<DocumentRepresentation> {
        let mut tape = Tape::new();
        let enc = self.params.encoder.bind(&mut tape);
        let var = crate::encoder::encode_query(&mut tape, &enc, tokens)?;
        Ok(DocumentRepresentation {
            vector: tape.value(var).to_vec(),
            source: ReprSource::Query,
        })
    }

    pub fn encode_masked_query(&self, tokens: &TokenSequence) -> Result<DocumentRepresentation> {
        let rep = self.encode_query(tokens)?;
        Ok(DocumentRepresentation {
            vector: rep.vector,
            source: ReprSource::MaskedQuery,
        })
    }

    pub fn encode_document(
        &self,
        tokens: &TokenSequence,
        patches: Option<&PatchGrid>,
    ) -> Result<DocumentRepresentation> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let var = encode_document(
            &mut tape,
            &bound,
            &self.frozen,
            self.config.weights_mode,
            tokens,
            patches,
        )?;
        Ok(DocumentRepresentation {
            vector: tape.value(var).to_vec(),
            source: if patches.is_some() {
                ReprSource::Multimodal
            } else {
                ReprSource::TextOnly
            },
        })
    }

    pub fn encode_image_only(
        &self,
        tokens: &TokenSequence,
        patches: &PatchGrid,
    ) -> Result<DocumentRepresentation> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let var = encode_image_only(
            &mut tape,
            &bound,
            &self.frozen,
            self.config.weights_mode,
            tokens,
            patches,
        )?;
        Ok(DocumentRepresentation {
            vector: tape.value(var).to_vec(),
            source: ReprSource::ImageOnly,
        })
    }
}

/// Re-weighted patch embeddings for a document: featurize (off-tape),
/// project, measure differences against the text, re-weight.
fn reweighted_patches(
    tape: &mut Tape,
    bound: &BoundModel,
    frozen: &FrozenVisualParams,
    mode: WeightsMode,
    tokens: &TokenSequence,
    patches: &PatchGrid,
) -> Result<Var> {
    let feats = frozen.featurize(patches)?;
    let feats_var = tape.leaf(&feats);
    let projected = project(tape, feats_var, &bound.projector)?;
    let text_emb = if tokens.is_empty() {
        None
    } else {
        Some(token_rows(tape, &bound.encoder, tokens)?)
    };
    let weights = patch_differences(tape, projected, text_emb, mode)?;
    reweighted_attention(tape, projected, &weights, &bound.extractor)
}

/// Rows of the fused document sequence before positions and transformer:
/// `[<start>, re-weighted patches, <end>, text rows]`.
pub fn fused_document_rows(
    tape: &mut Tape,
    bound: &BoundModel,
    frozen: &FrozenVisualParams,
    mode: WeightsMode,
    tokens: &TokenSequence,
    patches: &PatchGrid,
) -> Result<Var> {
    let reweighted = reweighted_patches(tape, bound, frozen, mode, tokens, patches)?;
    let e_start = tape.select_rows(bound.encoder.token_embedding, &[START_ID])?;
    let e_end = tape.select_rows(bound.encoder.token_embedding, &[END_ID])?;
    let mut parts = vec![e_start, reweighted, e_end];
    if !tokens.is_empty() {
        parts.push(token_rows(tape, &bound.encoder, tokens)?);
    }
    tape.concat_rows(&parts)
}

/// Full document path on a tape. Text-only documents run the plain text
/// encoder path; documents with neither text nor patches are rejected.
pub fn encode_document(
    tape: &mut Tape,
    bound: &BoundModel,
    frozen: &FrozenVisualParams,
    mode: WeightsMode,
    tokens: &TokenSequence,
    patches: Option<&PatchGrid>,
) -> Result<Var> {
    let max_text = bound.encoder.config.max_len;
    let rows = match patches {
        None => {
            if tokens.is_empty() {
                return Err(Error::contract(
                    "document has neither text tokens nor patches",
                ));
            }
            let rows = token_rows(tape, &bound.encoder, tokens)?;
            rows
        }
        Some(grid) => {
            if tokens.len() + grid.patch_count() + 2 > max_text {
                return Err(Error::contract(format!(
                    "fused sequence of {} exceeds positional table of {max_text}",
                    tokens.len() + grid.patch_count() + 2
                )));
            }
            fused_document_rows(tape, bound, frozen, mode, tokens, grid)?
        }
    };
    let seq_len = tape.shape(rows)[0];
    let x = add_positions(tape, &bound.encoder, rows, 0)?;
    let out = transformer(tape, &bound.encoder, x, &vec![false; seq_len])?;
    pool_first(tape, out)
}

/// Image-only path: the re-weighted patches alone through the transformer,
/// no special tokens. The weighting still uses the document's text when it
/// has any.
pub fn encode_image_only(
    tape: &mut Tape,
    bound: &BoundModel,
    frozen: &FrozenVisualParams,
    mode: WeightsMode,
    tokens: &TokenSequence,
    patches: &PatchGrid,
) -> Result<Var> {
    let rows = reweighted_patches(tape, bound, frozen, mode, tokens, patches)?;
    let seq_len = tape.shape(rows)[0];
    let x = add_positions(tape, &bound.encoder, rows, 0)?;
    let out = transformer(tape, &bound.encoder, x, &vec![false; seq_len])?;
    pool_first(tape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{END_ID, START_ID};

    fn test_model(seed: u64) -> Model {
        let config = ModelConfig {
            encoder: EncoderConfig {
                hidden_dim: 8,
                layers: 2,
                heads: 2,
                ffn_dim: 16,
                max_len: 32,
                vocab_size: 12,
            },
            d_clip: 6,
            raw_patch_dim: 5,
            frozen_seed: 99,
            weights_mode: WeightsMode::Dissimilar,
            max_text_len: 16,
        };
        Model::init(config, seed).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), 12).unwrap()
    }

    fn grid(patches: usize) -> PatchGrid {
        let rows = (0..patches)
            .map(|p| (0..5).map(|j| ((p * 5 + j) as f64 * 0.37).sin()).collect())
            .collect();
        PatchGrid::new(rows).unwrap()
    }

    #[test]
    fn text_only_matches_query_encoder_path() {
        let model = test_model(1);
        let doc = model.encode_document(&seq(&[4, 5, 6]), None).unwrap();
        let query = model.encode_query(&seq(&[4, 5, 6])).unwrap();
        assert_eq!(doc.vector, query.vector);
        assert_eq!(doc.source, ReprSource::TextOnly);
    }

    #[test]
    fn fused_sequence_layout() {
        let model = test_model(2);
        let tokens = seq(&[4, 5, 6, 7, 8, 9]);
        let patches = grid(4);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let rows = fused_document_rows(
            &mut tape,
            &bound,
            &model.frozen,
            WeightsMode::Dissimilar,
            &tokens,
            &patches,
        )
        .unwrap();
        // 1 start + 4 patches + 1 end + 6 text = 12 rows.
        assert_eq!(tape.shape(rows), &[12, 8]);

        let values = tape.value(rows);
        let emb = model.params.encoder.token_embedding.values();
        let d = 8;
        assert_eq!(&values[0..d], &emb[START_ID * d..(START_ID + 1) * d]);
        assert_eq!(&values[5 * d..6 * d], &emb[END_ID * d..(END_ID + 1) * d]);
        for (t, &id) in tokens.ids().iter().enumerate() {
            assert_eq!(
                &values[(6 + t) * d..(7 + t) * d],
                &emb[id * d..(id + 1) * d]
            );
        }
    }

    #[test]
    fn multimodal_representation_unit_norm() {
        let model = test_model(3);
        let rep = model.encode_document(&seq(&[4, 5]), Some(&grid(4))).unwrap();
        assert!((rep.norm() - 1.0).abs() < 1e-9);
        assert_eq!(rep.source, ReprSource::Multimodal);
    }

    #[test]
    fn rejects_document_with_nothing() {
        let model = test_model(4);
        assert!(model.encode_document(&TokenSequence::empty(), None).is_err());
    }

    #[test]
    fn image_only_defined_for_empty_text() {
        let model = test_model(5);
        let rep = model
            .encode_image_only(&TokenSequence::empty(), &grid(3))
            .unwrap();
        assert!((rep.norm() - 1.0).abs() < 1e-9);
        assert_eq!(rep.source, ReprSource::ImageOnly);
    }

    #[test]
    fn image_only_is_deterministic() {
        let model = test_model(6);
        let a = model.encode_image_only(&seq(&[4]), &grid(3)).unwrap();
        let b = model.encode_image_only(&seq(&[4]), &grid(3)).unwrap();
        assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn image_only_differs_from_full_document() {
        let model = test_model(7);
        let tokens = seq(&[4, 5, 6]);
        let patches = grid(4);
        let full = model.encode_document(&tokens, Some(&patches)).unwrap();
        let image = model.encode_image_only(&tokens, &patches).unwrap();
        let dist: f64 = full
            .vector
            .iter()
            .zip(&image.vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(dist > 1e-6, "fusion should not be degenerate");
    }

    #[test]
    fn fully_redundant_patches_still_finite() {
        // Patches projecting exactly onto a text token's direction get w = 0
        // everywhere: logits all zero, softmax uniform, output finite.
        let model = test_model(8);
        let tokens = seq(&[4, 5]);
        let patches = grid(4);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let feats = model.frozen.featurize(&patches).unwrap();
        let fvar = tape.leaf(&feats);
        let projected = project(&mut tape, fvar, &bound.projector).unwrap();
        let zero_w = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let dw = crate::extractor::DifferenceWeights {
            r: vec![-1.0; 4],
            w: vec![0.0; 4],
            var: zero_w,
        };
        let out =
            reweighted_attention(&mut tape, projected, &dw, &bound.extractor).unwrap();
        let e_start = tape
            .select_rows(bound.encoder.token_embedding, &[START_ID])
            .unwrap();
        let e_end = tape
            .select_rows(bound.encoder.token_embedding, &[END_ID])
            .unwrap();
        let text = token_rows(&mut tape, &bound.encoder, &tokens).unwrap();
        let rows = tape.concat_rows(&[e_start, out, e_end, text]).unwrap();
        let x = add_positions(&mut tape, &bound.encoder, rows, 0).unwrap();
        let y = transformer(&mut tape, &bound.encoder, x, &[false; 8]).unwrap();
        let pooled = pool_first(&mut tape, y).unwrap();
        let v = tape.value(pooled);
        assert!(v.iter().all(|x| x.is_finite()));
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pad_invariance_through_fusion() {
        // Padding the text segment must not change the pooled document
        // representation when pads are masked.
        let model = test_model(9);
        let patches = grid(3);
        let encode = |ids: &[usize], mask_tail: usize| {
            let tokens = seq(ids);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let rows = fused_document_rows(
                &mut tape,
                &bound,
                &model.frozen,
                WeightsMode::Uniform,
                &seq(&ids[..ids.len() - mask_tail]),
                &patches,
            )
            .unwrap();
            let text_pad = if mask_tail > 0 {
                let pads = seq(&ids[ids.len() - mask_tail..]);
                let pad_rows = token_rows(&mut tape, &bound.encoder, &pads).unwrap();
                tape.concat_rows(&[rows, pad_rows]).unwrap()
            } else {
                rows
            };
            let seq_len = tape.shape(text_pad)[0];
            let x = add_positions(&mut tape, &bound.encoder, text_pad, 0).unwrap();
            let mut mask = vec![false; seq_len];
            for m in mask.iter_mut().skip(seq_len - mask_tail) {
                *m = true;
            }
            let _ = &tokens;
            let y = transformer(&mut tape, &bound.encoder, x, &mask).unwrap();
            let pooled = pool_first(&mut tape, y).unwrap();
            tape.value(pooled).to_vec()
        };
        let plain = encode(&[4, 5], 0);
        let padded = encode(&[4, 5, 0, 0], 2);
        for (a, b) in plain.iter().zip(&padded) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
