use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::prepare::PreparedSample;
use crate::kgstore::{relation_histogram, Provenance, RelationShare};

/// Train/val accuracy gap above which a report is flagged as overfitting.
pub const OVERFIT_GAP_THRESHOLD: f64 = 0.15;

pub fn overfit_gap(train_accuracy: f64, val_accuracy: f64) -> f64 {
    train_accuracy - val_accuracy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub answer: String,
    pub count: usize,
    pub fraction: f64,
}

/// Predicted answers ranked by frequency, most common first; ties by answer.
pub fn analyze_bias<I, S>(predictions: I) -> Vec<BiasEntry>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for p in predictions {
        *counts.entry(p.as_ref().to_string()).or_insert(0) += 1;
        total += 1;
    }
    let mut out: Vec<BiasEntry> = counts
        .into_iter()
        .map(|(answer, count)| BiasEntry {
            answer,
            count,
            fraction: count as f64 / total as f64,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.answer.cmp(&b.answer)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub samples: usize,
    pub mean_triples: f64,
    pub zero_retrieval_fraction: f64,
    pub image_tier_triples: usize,
    pub keyword_tier_triples: usize,
    pub relation_histogram: BTreeMap<String, RelationShare>,
}

/// Statistics over the retrieval results the trainer consumes.
pub fn analyze_retrieval<'a, I>(samples: I) -> RetrievalStats
where
    I: IntoIterator<Item = &'a PreparedSample>,
{
    let samples: Vec<&PreparedSample> = samples.into_iter().collect();
    let n = samples.len();
    let total: usize = samples.iter().map(|s| s.retrieval.len()).sum();
    let zero = samples.iter().filter(|s| s.retrieval.is_empty()).count();
    let tier = |p: Provenance| {
        samples
            .iter()
            .flat_map(|s| &s.retrieval.entries)
            .filter(|e| e.provenance == p)
            .count()
    };
    RetrievalStats {
        samples: n,
        mean_triples: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        zero_retrieval_fraction: if n == 0 { 1.0 } else { zero as f64 / n as f64 },
        image_tier_triples: tier(Provenance::ImageConcept),
        keyword_tier_triples: tier(Provenance::QuestionKeyword),
        relation_histogram: relation_histogram(samples.iter().map(|s| &s.retrieval)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajorityBaseline {
    pub answer: usize,
    pub accuracy: f64,
}

/// Most common training answer (lowest index on ties), scored on `eval`.
pub fn majority_baseline(train: &[&PreparedSample], eval: &[&PreparedSample]) -> Option<MajorityBaseline> {
    if train.is_empty() || eval.is_empty() {
        return None;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in train {
        *counts.entry(s.target).or_insert(0) += 1;
    }
    let answer = counts
        .iter()
        .fold((usize::MAX, 0), |(a, c), (&k, &v)| if v > c { (k, v) } else { (a, c) })
        .0;
    let hits = eval.iter().filter(|s| s.target == answer).count();
    Some(MajorityBaseline {
        answer,
        accuracy: hits as f64 / eval.len() as f64,
    })
}
