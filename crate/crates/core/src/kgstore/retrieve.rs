//! Image-grounded retrieval: triples touching a detected image concept are
//! ranked ahead of triples that only match a question keyword.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{ConceptIndex, Triple};

pub const DEFAULT_K: usize = 5;
pub const IMAGE_TIER_MULTIPLIER: f64 = 2.0;
pub const KEYWORD_TIER_MULTIPLIER: f64 = 1.0;
/// Added for every query term a triple matches beyond the first.
pub const EXTRA_MATCH_BONUS: f64 = 0.5;

/// Which query tier a retrieved triple came from. Ordered: image first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ImageConcept,
    QuestionKeyword,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ImageConcept => "image_concept",
            Provenance::QuestionKeyword => "question_keyword",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedTriple {
    pub triple_id: usize,
    pub triple: Triple,
    pub provenance: Provenance,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievedTriple>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.entries.iter().map(|e| &e.triple)
    }

    pub fn triple_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.triple_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrieveOptions {
    pub k: usize,
    /// Relations never returned (empty by default).
    pub blocked_relations: BTreeSet<String>,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            blocked_relations: BTreeSet::new(),
        }
    }
}

impl RetrieveOptions {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }
}

/// Tier and score of a triple against the query term sets, or `None` if it
/// touches no query term.
pub fn score_triple(
    triple: &Triple,
    image_concepts: &HashSet<&str>,
    keywords: &HashSet<&str>,
) -> Option<(Provenance, f64)> {
    let in_image = |c: &str| image_concepts.contains(c);
    let in_query = |c: &str| in_image(c) || keywords.contains(c);
    let mut matched = 0usize;
    if in_query(&triple.head) {
        matched += 1;
    }
    if triple.tail != triple.head && in_query(&triple.tail) {
        matched += 1;
    }
    if matched == 0 {
        return None;
    }
    let (tier, mult) = if in_image(&triple.head) || in_image(&triple.tail) {
        (Provenance::ImageConcept, IMAGE_TIER_MULTIPLIER)
    } else {
        (Provenance::QuestionKeyword, KEYWORD_TIER_MULTIPLIER)
    };
    Some((tier, triple.weight * mult + EXTRA_MATCH_BONUS * (matched - 1) as f64))
}

/// Top-`k` triples for the query: image tier first, then keyword tier; score
/// descending within a tier, ties by triple id; one entry per
/// (head, relation, tail).
pub fn retrieve<S: AsRef<str>>(
    index: &ConceptIndex,
    image_concepts: &[S],
    question_keywords: &[S],
    opts: &RetrieveOptions,
) -> RetrievalResult {
    let image: HashSet<&str> = image_concepts.iter().map(AsRef::as_ref).collect();
    let keywords: HashSet<&str> = question_keywords.iter().map(AsRef::as_ref).collect();

    let mut ids = BTreeSet::new();
    for term in image.iter().chain(keywords.iter()) {
        ids.extend(index.triples_for(term).iter().copied());
    }

    let mut candidates: Vec<(Provenance, f64, usize)> = ids
        .into_iter()
        .filter(|&id| !opts.blocked_relations.contains(&index.triple(id).relation))
        .filter_map(|id| score_triple(index.triple(id), &image, &keywords).map(|(p, s)| (p, s, id)))
        .collect();
    candidates.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));

    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(opts.k);
    for (provenance, score, id) in candidates {
        if entries.len() == opts.k {
            break;
        }
        let t = index.triple(id);
        if !seen.insert(t.key()) {
            continue;
        }
        entries.push(RetrievedTriple {
            triple_id: id,
            triple: t.clone(),
            provenance,
            score,
        });
    }
    RetrievalResult { entries }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationShare {
    pub count: usize,
    pub fraction: f64,
}

/// Relation frequencies over every triple in a stream of results.
pub fn relation_histogram<'a, I>(results: I) -> BTreeMap<String, RelationShare>
where
    I: IntoIterator<Item = &'a RetrievalResult>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in results {
        for t in r.triples() {
            *counts.entry(t.relation.clone()).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(rel, count)| {
            let fraction = count as f64 / total as f64;
            (rel, RelationShare { count, fraction })
        })
        .collect()
}
