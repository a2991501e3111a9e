use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::prepare::{to_batch, PreparedSample};
use super::PipelineError;
use crate::models::{predict_batch, ModelConfig, ModelParams};

const EVAL_BATCH: usize = 128;
const TOP_CONFUSIONS: usize = 10;

/// Anything that maps prepared samples to answer indices.
pub trait Predictor {
    fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<usize>, PipelineError>;
}

pub struct ModelPredictor<'a> {
    params: &'a ModelParams<f32>,
    cfg: &'a ModelConfig,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(params: &'a ModelParams<f32>, cfg: &'a ModelConfig) -> Self {
        Self { params, cfg }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, samples: &[&PreparedSample]) -> Result<Vec<usize>, PipelineError> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let batch = to_batch(chunk)?;
            for o in predict_batch(self.params, self.cfg, &batch)? {
                out.push(argmax(&o.logits));
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub gold: usize,
    pub predicted: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: usize,
    pub gold: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Keyed by question type name.
    pub per_type: BTreeMap<String, TypeAccuracy>,
    /// Most frequent (gold, predicted) mistakes, count descending.
    pub top_confusions: Vec<ConfusionEntry>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

/// Exact-match accuracy, overall and per question type.
pub fn evaluate(predictor: &dyn Predictor, samples: &[&PreparedSample]) -> Result<EvalResult, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::Empty("evaluate"));
    }
    let predicted = predictor.predict(samples)?;
    if predicted.len() != samples.len() {
        return Err(PipelineError::Config(format!(
            "predictor returned {} answers for {} samples",
            predicted.len(),
            samples.len()
        )));
    }
    let mut per_type: BTreeMap<String, TypeAccuracy> = BTreeMap::new();
    let mut confusion: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut correct = 0;
    let mut predictions = Vec::with_capacity(samples.len());
    for (s, &p) in samples.iter().zip(&predicted) {
        let hit = p == s.target;
        correct += hit as usize;
        let e = per_type.entry(s.question_type.as_str().to_string()).or_insert(TypeAccuracy {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        e.total += 1;
        e.correct += hit as usize;
        if !hit {
            *confusion.entry((s.target, p)).or_insert(0) += 1;
        }
        predictions.push(Prediction {
            sample_id: s.sample_id,
            gold: s.target,
            predicted: p,
        });
    }
    for t in per_type.values_mut() {
        t.accuracy = t.correct as f64 / t.total as f64;
    }
    let mut top_confusions: Vec<ConfusionEntry> = confusion
        .into_iter()
        .map(|((gold, predicted), count)| ConfusionEntry { gold, predicted, count })
        .collect();
    top_confusions.sort_by(|a, b| b.count.cmp(&a.count).then((a.gold, a.predicted).cmp(&(b.gold, b.predicted))));
    top_confusions.truncate(TOP_CONFUSIONS);
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        per_type,
        top_confusions,
        predictions,
    })
}
