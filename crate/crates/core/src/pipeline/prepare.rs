use std::collections::HashMap;

use super::PipelineError;
use crate::featstore::{detect_concepts, embed_triple, extract_keywords, positioned_token_vectors, StopwordSet};
use crate::kgstore::{retrieve, ConceptIndex, RetrievalResult, RetrieveOptions};
use crate::models::ModelBatch;
use crate::synthvqa::{Dataset, QuestionType, Split, SyntheticTables};
use crate::tensorcore::{Segment, Tensor};

pub const DEFAULT_TOP_K_CONCEPTS: usize = 5;

/// Everything the per-sample knowledge pipeline reads.
#[derive(Clone, Debug)]
pub struct KnowledgeContext {
    pub index: ConceptIndex,
    pub tables: SyntheticTables,
    pub stopwords: StopwordSet,
    /// Concepts kept from zero-shot detection.
    pub top_k_concepts: usize,
    pub retrieve: RetrieveOptions,
}

impl KnowledgeContext {
    pub fn new(index: ConceptIndex, tables: SyntheticTables) -> Self {
        Self {
            index,
            tables,
            stopwords: StopwordSet::english(),
            top_k_concepts: DEFAULT_TOP_K_CONCEPTS,
            retrieve: RetrieveOptions::default(),
        }
    }
}

/// Model-ready inputs of one sample, plus the intermediate results that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub sample_id: usize,
    pub split: Split,
    pub question_type: QuestionType,
    pub target: usize,
    pub image: Vec<f32>,
    /// One row per in-vocabulary question token; a single zero row if none.
    pub question_tokens: Vec<Vec<f32>>,
    /// Embedded retrieved triples, in retrieval order.
    pub knowledge: Vec<Vec<f32>>,
    pub concepts: Vec<String>,
    pub keywords: Vec<String>,
    pub retrieval: RetrievalResult,
}

/// detect_concepts → extract_keywords → retrieve → embed, for every sample.
pub fn prepare_samples(data: &Dataset, ctx: &KnowledgeContext) -> Result<Vec<PreparedSample>, PipelineError> {
    let scenes: HashMap<&str, &[f32]> = data
        .scenes
        .iter()
        .map(|s| (s.scene_id.as_str(), s.image_vec.as_slice()))
        .collect();
    let words = &ctx.tables.words;
    let mut out = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let image = *scenes.get(s.scene_id.as_str()).ok_or_else(|| PipelineError::Sample {
            sample_id: s.sample_id,
            reason: format!("unknown scene {}", s.scene_id),
        })?;
        let concepts = detect_concepts(image, &ctx.tables.labels, ctx.top_k_concepts)?.tokens();
        let keywords = extract_keywords(&s.question, &ctx.stopwords);
        let retrieval = retrieve(&ctx.index, &concepts, &keywords, &ctx.retrieve);
        let knowledge: Vec<Vec<f32>> = retrieval
            .triples()
            .filter_map(|t| embed_triple(t, &ctx.tables.kg))
            .collect();
        let mut question_tokens = positioned_token_vectors(&s.question, words);
        if question_tokens.is_empty() {
            question_tokens.push(vec![0.0; words.dim()]);
        }
        out.push(PreparedSample {
            sample_id: s.sample_id,
            split: s.split,
            question_type: s.question_type,
            target: s.gold_answer,
            image: image.to_vec(),
            question_tokens,
            knowledge,
            concepts,
            keywords,
            retrieval,
        });
    }
    Ok(out)
}

/// Stacks prepared samples into one model batch.
pub fn to_batch(samples: &[&PreparedSample]) -> Result<ModelBatch<f32>, PipelineError> {
    let first = samples.first().ok_or(PipelineError::Empty("batch"))?;
    let (img_dim, q_dim) = (first.image.len(), first.question_tokens[0].len());
    let k_dim = samples
        .iter()
        .find_map(|s| s.knowledge.first().map(Vec::len))
        .unwrap_or(0);
    let mut images = Vec::with_capacity(samples.len() * img_dim);
    let mut questions = Vec::new();
    let mut knowledge = Vec::new();
    let mut question_segments = Vec::with_capacity(samples.len());
    let mut knowledge_segments = Vec::with_capacity(samples.len());
    let (mut nq, mut nk) = (0, 0);
    for s in samples {
        images.extend_from_slice(&s.image);
        question_segments.push(Segment::new(nq, s.question_tokens.len()));
        for r in &s.question_tokens {
            questions.extend_from_slice(r);
        }
        nq += s.question_tokens.len();
        knowledge_segments.push(Segment::new(nk, s.knowledge.len()));
        for r in &s.knowledge {
            knowledge.extend_from_slice(r);
        }
        nk += s.knowledge.len();
    }
    Ok(ModelBatch {
        images: Tensor::new(samples.len(), img_dim, images).map_err(crate::models::ModelError::from)?,
        questions: Tensor::new(nq, q_dim, questions).map_err(crate::models::ModelError::from)?,
        question_segments,
        knowledge: if nk == 0 {
            None
        } else {
            Some(Tensor::new(nk, k_dim, knowledge).map_err(crate::models::ModelError::from)?)
        },
        knowledge_segments,
    })
}
