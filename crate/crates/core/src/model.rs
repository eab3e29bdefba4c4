//! Pre-LN transformer encoder with one linear classification head per slot
//! over the `[CLS]` representation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{head_class_counts, CsfFrame, SchemaError, SlotName};
use crate::tensor::{AttentionSpec, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{Encoding, TokenizerModel};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const INIT_STD: f64 = 0.02;
// Tensors per encoder block, in layout order.
const BLOCK_TENSORS: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} positions but max_len is {max_len}")]
    InputTooLong { got: usize, max_len: usize },
    #[error("token id {id} is outside the model vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("tokenizer has {tokenizer} tokens but the model vocabulary is {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error("parameter table mismatch: {0}")]
    Parameters(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub head_class_counts: Vec<usize>,
    /// Applied to attention weights and FFN outputs during training only.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            heads: 4,
            layers: 4,
            ffn: 1024,
            vocab: 8000,
            max_len: 64,
            head_class_counts: head_class_counts().to_vec(),
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// The reduced model used for desk-scale runs. Dropout is off because
    /// five epochs on 8,000 samples underfit rather than overfit.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 128,
            layers: 2,
            ffn: 512,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} leaves no room for [CLS] and [SEP]", self.max_len));
        }
        if self.head_class_counts != head_class_counts() {
            return bad(format!(
                "head_class_counts {:?} do not match the schema {:?}",
                self.head_class_counts,
                head_class_counts()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Names, shapes and kinds of every parameter tensor in layout order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let (d, f) = (self.hidden, self.ffn);
        let mut out = vec![
            ParamSpec::new("embed.token".into(), vec![self.vocab, d], ParamKind::Embedding),
            ParamSpec::new("embed.position".into(), vec![self.max_len, d], ParamKind::Embedding),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push(ParamSpec::new(p("ln1.gain"), vec![d], ParamKind::NormGain));
            out.push(ParamSpec::new(p("ln1.bias"), vec![d], ParamKind::NormBias));
            for proj in ["query", "key", "value", "output"] {
                out.push(ParamSpec::new(p(&format!("attn.{proj}.weight")), vec![d, d], ParamKind::Weight));
                out.push(ParamSpec::new(p(&format!("attn.{proj}.bias")), vec![d], ParamKind::Bias));
            }
            out.push(ParamSpec::new(p("ln2.gain"), vec![d], ParamKind::NormGain));
            out.push(ParamSpec::new(p("ln2.bias"), vec![d], ParamKind::NormBias));
            out.push(ParamSpec::new(p("ffn.in.weight"), vec![d, f], ParamKind::Weight));
            out.push(ParamSpec::new(p("ffn.in.bias"), vec![f], ParamKind::Bias));
            out.push(ParamSpec::new(p("ffn.out.weight"), vec![f, d], ParamKind::Weight));
            out.push(ParamSpec::new(p("ffn.out.bias"), vec![d], ParamKind::Bias));
        }
        out.push(ParamSpec::new("final_ln.gain".into(), vec![d], ParamKind::NormGain));
        out.push(ParamSpec::new("final_ln.bias".into(), vec![d], ParamKind::NormBias));
        for (slot, &n) in SlotName::ALL.iter().zip(&self.head_class_counts) {
            out.push(ParamSpec::new(format!("heads.{slot}.weight"), vec![d, n], ParamKind::Weight));
            out.push(ParamSpec::new(format!("heads.{slot}.bias"), vec![n], ParamKind::Bias));
        }
        out
    }

    /// Exact number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.parameter_specs().iter().map(|s| s.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Whether AdamW applies decoupled weight decay to this kind.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, kind: ParamKind) -> Self {
        ParamSpec { name, shape, kind }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// How a batch is laid out for attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Only non-PAD positions are processed.
    Trimmed,
    /// All `max_len` positions are processed; PAD keys are masked.
    Padded,
}

/// Per-slot logits, one `[batch, n_classes]` tensor per slot in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn batch_size(&self) -> usize {
        self.logits.first().map_or(0, |t| t.rows())
    }

    /// Per-slot argmax for one batch row; ties go to the lowest index.
    pub fn argmax(&self, row: usize) -> [usize; 9] {
        std::array::from_fn(|s| self.logits[s].argmax_row(row))
    }

    pub fn frame(&self, row: usize) -> Result<CsfFrame, SchemaError> {
        CsfFrame::from_indices(self.argmax(row))
    }
}

/// Tape handles produced by [`Model::forward_on_tape`].
pub struct TapeForward {
    /// One handle per parameter tensor, in layout order.
    pub params: Vec<Var>,
    /// One `[batch, n_classes]` handle per slot.
    pub logits: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
}

impl Model {
    /// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1, drawn in layout
    /// order from a ChaCha8 stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.parameter_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid normal");
        let params = specs
            .iter()
            .map(|s| match s.kind {
                ParamKind::Embedding | ParamKind::Weight => {
                    let data = (0..s.numel()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::new(s.shape.clone(), data).expect("spec shape")
                }
                ParamKind::NormGain => Tensor::filled(&s.shape, 1.0),
                ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Model { config, specs, params })
    }

    /// Rebuilds a model from named tensors, which must match the config's
    /// layout exactly (same names, same order, same shapes).
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.parameter_specs();
        if tensors.len() != specs.len() {
            return Err(ModelError::Parameters(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, tensor)) in specs.iter().zip(tensors) {
            if spec.name != name {
                return Err(ModelError::Parameters(format!("expected `{}`, found `{name}`", spec.name)));
            }
            if tensor.shape() != spec.shape.as_slice() {
                return Err(ModelError::Parameters(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    spec.shape
                )));
            }
            params.push(tensor);
        }
        Ok(Model { config, specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the forward pass on `tape`. Dropout is applied only when
    /// `dropout_rng` is given and the configured rate is positive.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &[Encoding],
        layout: Layout,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<TapeForward, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let cfg = &self.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        let mut key_mask = Vec::new();
        for enc in batch {
            if enc.ids.len() > cfg.max_len {
                return Err(ModelError::InputTooLong {
                    got: enc.ids.len(),
                    max_len: cfg.max_len,
                });
            }
            let len = match layout {
                Layout::Trimmed => enc.attention_mask.iter().take_while(|&&m| m == 1).count(),
                Layout::Padded => enc.ids.len(),
            };
            segments.push((ids.len(), len));
            for (i, &id) in enc.ids[..len].iter().enumerate() {
                if id as usize >= cfg.vocab {
                    return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab });
                }
                ids.push(id as usize);
                positions.push(i);
                key_mask.push(enc.attention_mask[i] == 1);
            }
        }
        let cls_rows: Vec<usize> = segments.iter().map(|&(start, _)| start).collect();
        let spec = AttentionSpec {
            segments,
            heads: cfg.heads,
            key_mask: (layout == Layout::Padded).then_some(key_mask),
        };
        let rate = cfg.dropout;

        let p: Vec<Var> = self.params.iter().map(|t| tape.param(t)).collect();
        let tok = tape.embedding(p[0], &ids)?;
        let pos = tape.embedding(p[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..cfg.layers {
            let b = 2 + l * BLOCK_TENSORS;
            let h = tape.layer_norm(x, p[b], p[b + 1], LAYER_NORM_EPS)?;
            let q = tape.linear(h, p[b + 2], p[b + 3])?;
            let k = tape.linear(h, p[b + 4], p[b + 5])?;
            let v = tape.linear(h, p[b + 6], p[b + 7])?;
            let a = match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => tape.attention_with_dropout(q, k, v, &spec, rate, rng)?,
                _ => tape.attention(q, k, v, &spec)?,
            };
            let o = tape.linear(a, p[b + 8], p[b + 9])?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, p[b + 10], p[b + 11], LAYER_NORM_EPS)?;
            let f = tape.linear(h, p[b + 12], p[b + 13])?;
            let f = tape.gelu(f);
            let mut f = tape.linear(f, p[b + 14], p[b + 15])?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = tape.dropout(f, rate, rng);
            }
            x = tape.add(x, f)?;
        }
        // Layer norm is row-wise, so normalizing only the [CLS] rows is exact.
        let fin = 2 + cfg.layers * BLOCK_TENSORS;
        let cls = tape.select_rows(x, &cls_rows)?;
        let cls = tape.layer_norm(cls, p[fin], p[fin + 1], LAYER_NORM_EPS)?;
        let logits = (0..SlotName::COUNT)
            .map(|s| tape.linear(cls, p[fin + 2 + 2 * s], p[fin + 3 + 2 * s]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TapeForward { params: p, logits })
    }

    /// Inference forward pass (no dropout).
    pub fn forward(&self, batch: &[Encoding], layout: Layout) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, batch, layout, None)?;
        Ok(ForwardOutput {
            logits: out.logits.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

/// Text-to-frame inference with a fixed model and tokenizer.
#[derive(Debug, Clone)]
pub struct Predictor {
    model: Model,
    tokenizer: TokenizerModel,
}

impl Predictor {
    pub fn new(model: Model, tokenizer: TokenizerModel) -> Result<Self, ModelError> {
        if tokenizer.vocab_size() > model.config().vocab {
            return Err(ModelError::VocabMismatch {
                tokenizer: tokenizer.vocab_size(),
                model: model.config().vocab,
            });
        }
        Ok(Predictor { model, tokenizer })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn tokenizer(&self) -> &TokenizerModel {
        &self.tokenizer
    }

    pub fn encode(&self, text: &str) -> Encoding {
        self.tokenizer.encode(text, self.model.config().max_len)
    }

    pub fn predict(&self, text: &str) -> Result<CsfFrame, ModelError> {
        let out = self.model.forward(&[self.encode(text)], Layout::Trimmed)?;
        Ok(out.frame(0)?)
    }

    pub fn predict_batch(&self, texts: &[&str]) -> Result<Vec<CsfFrame>, ModelError> {
        let batch: Vec<Encoding> = texts.iter().map(|t| self.encode(t)).collect();
        let out = self.model.forward(&batch, Layout::Trimmed)?;
        (0..texts.len()).map(|r| Ok(out.frame(r)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 4,
            layers: 2,
            ffn: 32,
            vocab: 300,
            max_len: 12,
            ..ModelConfig::default()
        }
    }

    fn enc(ids: &[u32], max_len: usize) -> Encoding {
        let mut full = ids.to_vec();
        full.resize(max_len, 0);
        let mut mask = vec![1u8; ids.len()];
        mask.resize(max_len, 0);
        Encoding {
            ids: full,
            attention_mask: mask,
            overflow: false,
        }
    }

    #[test]
    fn default_parameter_count_matches_closed_form() {
        let (v, d, f, l, m) = (8000, 256, 1024, 4, 64);
        let block = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
        let heads: usize = head_class_counts().iter().map(|&n| d * n + n).sum();
        let expected = v * d + m * d + l * block + 2 * d + heads;
        assert_eq!(expected, 5_242_697);
        assert_eq!(ModelConfig::default().num_params(), expected);
    }

    #[test]
    fn names_are_unique() {
        let specs = ModelConfig::default().parameter_specs();
        let names: std::collections::HashSet<_> = specs.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), specs.len());
        assert_eq!(specs.len(), 2 + 4 * BLOCK_TENSORS + 2 + 18);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(Model::init(c, 0), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny();
        c.head_class_counts[1] = 34;
        assert!(matches!(Model::init(c, 0), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(tiny(), 1).unwrap();
        assert_eq!(a, Model::init(tiny(), 1).unwrap());
        assert_ne!(a, Model::init(tiny(), 2).unwrap());
        assert!(a.param("final_ln.gain").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(a.param("heads.event.bias").unwrap().data().iter().all(|&x| x == 0.0));
        let w = a.param("embed.token").unwrap().data();
        let mean = w.iter().sum::<f32>() / w.len() as f32;
        let std = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / w.len() as f32).sqrt();
        assert!(mean.abs() < 2e-3 && (std - 0.02).abs() < 2e-3, "mean {mean} std {std}");
    }

    #[test]
    fn output_shapes_follow_heads() {
        let m = Model::init(tiny(), 3).unwrap();
        let out = m.forward(&[enc(&[2, 10, 11, 3], 12), enc(&[2, 3], 12)], Layout::Trimmed).unwrap();
        let shapes: Vec<_> = out.logits.iter().map(|t| t.shape().to_vec()).collect();
        let want: Vec<_> = head_class_counts().iter().map(|&n| vec![2, n]).collect();
        assert_eq!(shapes, want);
    }

    #[test]
    fn padded_and_trimmed_layouts_agree() {
        let m = Model::init(tiny(), 4).unwrap();
        let batch = [enc(&[2, 40, 41, 42, 3], 12), enc(&[2, 7, 3], 12)];
        let a = m.forward(&batch, Layout::Trimmed).unwrap();
        let b = m.forward(&batch, Layout::Padded).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn oversized_and_out_of_vocab_inputs_fail() {
        let m = Model::init(tiny(), 5).unwrap();
        assert!(matches!(
            m.forward(&[enc(&[2, 3], 13)], Layout::Padded),
            Err(ModelError::InputTooLong { .. })
        ));
        assert!(matches!(
            m.forward(&[enc(&[2, 300, 3], 12)], Layout::Trimmed),
            Err(ModelError::TokenOutOfRange { id: 300, .. })
        ));
        assert!(matches!(m.forward(&[], Layout::Trimmed), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn from_tensors_checks_layout() {
        let m = Model::init(tiny(), 6).unwrap();
        let named: Vec<_> = m.specs().iter().map(|s| s.name.clone()).zip(m.params().to_vec()).collect();
        assert_eq!(Model::from_tensors(tiny(), named.clone()).unwrap(), m);
        let mut renamed = named.clone();
        renamed[3].0 = "bogus".into();
        assert!(matches!(Model::from_tensors(tiny(), renamed), Err(ModelError::Parameters(_))));
        let mut reshaped = named;
        reshaped[0].1 = Tensor::zeros(&[1]);
        assert!(matches!(Model::from_tensors(tiny(), reshaped), Err(ModelError::Parameters(_))));
    }

    #[test]
    fn decay_applies_to_weights_and_embeddings_only() {
        for s in ModelConfig::default().parameter_specs() {
            let expect = !(s.name.ends_with(".bias") || s.name.contains("ln"));
            assert_eq!(s.kind.decays(), expect, "{}", s.name);
        }
    }
}
