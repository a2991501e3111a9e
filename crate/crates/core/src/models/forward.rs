//! Model A and Model B forward graphs over a batch of samples.
//!
//! Every fusion block is: multi-head cross-attention → residual add → layer
//! norm → ReLU MLP → residual add → layer norm. The image row is the query;
//! question tokens (stage 1) or projected knowledge triples (stage 2) are the
//! keys and values.

use super::params::BoundParams;
use super::{ModelConfig, ModelError, ModelParams, Variant};
use crate::tensorcore::{
    multi_head_attention, AttentionConfig, AttentionParams, Real, Segment, Tape, Tensor, Var,
};

/// Inputs for `B` samples. Question tokens and knowledge triples of all
/// samples are stacked row-wise; segment `i` selects sample `i`'s rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBatch<T> {
    pub images: Tensor<T>,
    pub questions: Tensor<T>,
    pub question_segments: Vec<Segment>,
    /// `None` when no sample in the batch has a triple.
    pub knowledge: Option<Tensor<T>>,
    pub knowledge_segments: Vec<Segment>,
}

/// One sample's raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput<T> {
    pub image: Vec<T>,
    /// At least one row.
    pub question_tokens: Vec<Vec<T>>,
    pub knowledge: Vec<Vec<T>>,
}

impl<T: Real> ModelBatch<T> {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[SampleInput<T>]) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let images = Tensor::from_rows(&samples.iter().map(|s| s.image.as_slice()).collect::<Vec<_>>())?;
        let mut q_rows: Vec<&[T]> = Vec::new();
        let mut k_rows: Vec<&[T]> = Vec::new();
        let mut question_segments = Vec::with_capacity(samples.len());
        let mut knowledge_segments = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.question_tokens.is_empty() {
                return Err(ModelError::Input(format!("sample {i} has no question rows")));
            }
            question_segments.push(Segment::new(q_rows.len(), s.question_tokens.len()));
            q_rows.extend(s.question_tokens.iter().map(Vec::as_slice));
            knowledge_segments.push(Segment::new(k_rows.len(), s.knowledge.len()));
            k_rows.extend(s.knowledge.iter().map(Vec::as_slice));
        }
        Ok(Self {
            images,
            questions: Tensor::from_rows(&q_rows)?,
            question_segments,
            knowledge: if k_rows.is_empty() {
                None
            } else {
                Some(Tensor::from_rows(&k_rows)?)
            },
            knowledge_segments,
        })
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let b = self.len();
        let dim = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(ModelError::Input(format!("{what} dim {got}, config expects {want}")))
            }
        };
        dim("image", self.images.cols(), cfg.image_dim)?;
        dim("question", self.questions.cols(), cfg.question_dim)?;
        if let Some(k) = &self.knowledge {
            dim("knowledge", k.cols(), cfg.knowledge_dim)?;
        }
        if self.question_segments.len() != b || self.knowledge_segments.len() != b {
            return Err(ModelError::Input("segment count differs from batch size".into()));
        }
        let k_rows = self.knowledge.as_ref().map_or(0, Tensor::rows);
        for (i, s) in self.knowledge_segments.iter().enumerate() {
            if s.len > cfg.max_triples {
                return Err(ModelError::Input(format!(
                    "sample {i} has {} triples, limit is {}",
                    s.len, cfg.max_triples
                )));
            }
            if s.end() > k_rows {
                return Err(ModelError::Input(format!("knowledge segment {i} out of range")));
            }
        }
        Ok(())
    }
}

/// Tape nodes produced by a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub logits: Var,
    pub stage1_attention: Var,
    /// Stage-2 attention node and the batch rows it covers (Model B only).
    pub stage2_attention: Option<(Var, Vec<usize>)>,
}

/// Per-sample view of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    /// Head-averaged weights of the image query over the question tokens.
    pub stage1_attention: Vec<T>,
    /// Head-averaged weights over the knowledge triples; absent when the
    /// variant has no second stage or the sample has no triples.
    pub stage2_attention: Option<Vec<T>>,
}

fn attention_params(p: &BoundParams, block: &str) -> AttentionParams {
    let v = |n: &str| p.var(&format!("{block}.attn.{n}"));
    AttentionParams {
        wq: v("q.weight"),
        bq: v("q.bias"),
        wk: v("k.weight"),
        bk: v("k.bias"),
        wv: v("v.weight"),
        bv: v("v.bias"),
        wo: v("o.weight"),
        bo: v("o.bias"),
    }
}

/// Returns (block output, attention node).
fn fusion_block<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    block: &str,
    query: Var,
    kv: Var,
    segments: &[Segment],
    cfg: &ModelConfig,
) -> Result<(Var, Var), ModelError> {
    let attn_cfg = AttentionConfig::new(cfg.hidden_dim, cfg.num_heads)?;
    let (attended, weights) = multi_head_attention(tape, query, kv, segments, &attention_params(p, block), &attn_cfg)?;
    let v = |n: &str| p.var(&format!("{block}.{n}"));
    let res1 = tape.add(query, attended)?;
    let h1 = tape.layer_norm(res1, v("norm1.gain"), v("norm1.bias"))?;
    let m = tape.linear(h1, v("mlp1.weight"), v("mlp1.bias"))?;
    let m = tape.relu(m)?;
    let m = tape.linear(m, v("mlp2.weight"), v("mlp2.bias"))?;
    let res2 = tape.add(h1, m)?;
    let out = tape.layer_norm(res2, v("norm2.gain"), v("norm2.bias"))?;
    Ok((out, weights))
}

/// Records the forward graph for `batch` on `tape`.
pub fn forward_batch<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &ModelBatch<T>,
) -> Result<BatchForward, ModelError> {
    cfg.validate()?;
    batch.check(cfg)?;
    let images = tape.constant(batch.images.clone())?;
    let questions = tape.constant(batch.questions.clone())?;
    let img = tape.linear(images, p.var("image_proj.weight"), p.var("image_proj.bias"))?;
    let q = tape.linear(questions, p.var("question_proj.weight"), p.var("question_proj.bias"))?;
    let knowledge = match &batch.knowledge {
        Some(k) => {
            let k = tape.constant(k.clone())?;
            Some(tape.linear(k, p.var("knowledge_proj.weight"), p.var("knowledge_proj.bias"))?)
        }
        None => None,
    };

    match cfg.variant {
        Variant::A => {
            let (fused, a1) = fusion_block(tape, p, "fusion", img, q, &batch.question_segments, cfg)?;
            let pooled = match knowledge {
                Some(k) => tape.segment_mean(k, &batch.knowledge_segments)?,
                None => tape.constant(Tensor::zeros(batch.len(), cfg.hidden_dim))?,
            };
            let joined = tape.concat_cols(fused, pooled)?;
            let logits = tape.linear(joined, p.var("classifier.weight"), p.var("classifier.bias"))?;
            Ok(BatchForward {
                logits,
                stage1_attention: a1,
                stage2_attention: None,
            })
        }
        Variant::B => {
            let (s1, a1) = fusion_block(tape, p, "stage1", img, q, &batch.question_segments, cfg)?;
            let rows: Vec<usize> = (0..batch.len())
                .filter(|&i| batch.knowledge_segments[i].len > 0)
                .collect();
            let (s2, a2) = match knowledge {
                Some(k) if !rows.is_empty() => {
                    let segs: Vec<Segment> = rows.iter().map(|&i| batch.knowledge_segments[i]).collect();
                    let sub = tape.gather_rows(s1, &rows)?;
                    let (refined, a2) = fusion_block(tape, p, "stage2", sub, k, &segs, cfg)?;
                    // Samples without triples pass through stage 2 unchanged.
                    let merged = tape.replace_rows(s1, refined, &rows)?;
                    (merged, Some((a2, rows)))
                }
                _ => (s1, None),
            };
            let logits = tape.linear(s2, p.var("classifier.weight"), p.var("classifier.bias"))?;
            Ok(BatchForward {
                logits,
                stage1_attention: a1,
                stage2_attention: a2,
            })
        }
    }
}

impl BatchForward {
    /// Splits the recorded pass into per-sample outputs.
    pub fn outputs<T: Real>(&self, tape: &Tape<T>) -> Vec<ForwardOutput<T>> {
        let logits = tape.value(self.logits);
        let s1 = tape.attention_weights(self.stage1_attention).unwrap_or_default();
        let mut s2: Vec<Option<Vec<T>>> = vec![None; logits.rows()];
        if let Some((node, rows)) = &self.stage2_attention {
            let w = tape.attention_weights(*node).unwrap_or_default();
            for (row, weights) in rows.iter().zip(w) {
                s2[*row] = Some(weights);
            }
        }
        (0..logits.rows())
            .map(|i| ForwardOutput {
                logits: logits.row(i).to_vec(),
                stage1_attention: s1.get(i).cloned().unwrap_or_default(),
                stage2_attention: s2[i].take(),
            })
            .collect()
    }
}

/// Logits for a batch without keeping the tape.
pub fn predict_batch<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &ModelBatch<T>,
) -> Result<Vec<ForwardOutput<T>>, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let fwd = forward_batch(&mut tape, &bound, cfg, batch)?;
    Ok(fwd.outputs(&tape))
}

fn forward_single<T: Real>(
    variant: Variant,
    image: &[T],
    question_tokens: &[Vec<T>],
    knowledge: &[Vec<T>],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<T>, ModelError> {
    if cfg.variant != variant {
        return Err(ModelError::InvalidConfig(format!(
            "config is variant {:?}, called forward for {variant:?}",
            cfg.variant
        )));
    }
    let batch = ModelBatch::from_samples(&[SampleInput {
        image: image.to_vec(),
        question_tokens: question_tokens.to_vec(),
        knowledge: knowledge.to_vec(),
    }])?;
    Ok(predict_batch(params, cfg, &batch)?.remove(0))
}

/// Model A on one sample: attention fusion, pooled knowledge concatenated.
pub fn forward_model_a<T: Real>(
    image: &[T],
    question_tokens: &[Vec<T>],
    knowledge: &[Vec<T>],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<T>, ModelError> {
    forward_single(Variant::A, image, question_tokens, knowledge, params, cfg)
}

/// Model B on one sample: image→question block, then fused→knowledge block.
pub fn forward_model_b<T: Real>(
    image: &[T],
    question_tokens: &[Vec<T>],
    knowledge: &[Vec<T>],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<ForwardOutput<T>, ModelError> {
    forward_single(Variant::B, image, question_tokens, knowledge, params, cfg)
}
