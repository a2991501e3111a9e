//! ConceptNet-format knowledge graph: dump parsing, a concept-indexed triple
//! store, and image-first retrieval.

mod index;
mod parse;
mod retrieve;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{build_index, ConceptIndex, IndexMeta};
pub use parse::{ingest, parse_assertion_line, IngestStats, Ingested, DEFAULT_LANGUAGE};
pub use retrieve::{
    relation_histogram, retrieve, score_triple, Provenance, RelationShare, RetrievalResult, RetrieveOptions,
    RetrievedTriple, DEFAULT_K, EXTRA_MATCH_BONUS, IMAGE_TIER_MULTIPLIER, KEYWORD_TIER_MULTIPLIER,
};

/// One knowledge-graph edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub weight: f64,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>, weight: f64) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            weight,
        }
    }

    /// Checks the token and weight invariants.
    pub fn validate(&self) -> Result<(), String> {
        for (what, tok) in [("head", &self.head), ("tail", &self.tail)] {
            if tok.is_empty() || tok.contains(char::is_whitespace) || tok.starts_with("/c/") {
                return Err(format!("invalid {what} concept {tok:?}"));
            }
        }
        if self.relation.is_empty()
            || self.relation.contains(char::is_whitespace)
            || self.relation.starts_with("/r/")
        {
            return Err(format!("invalid relation {:?}", self.relation));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(format!("invalid weight {}", self.weight));
        }
        Ok(())
    }

    pub fn key(&self) -> (&str, &str, &str) {
        (&self.head, &self.relation, &self.tail)
    }

    pub fn touches(&self, concept: &str) -> bool {
        self.head == concept || self.tail == concept
    }

    /// Renders the triple as a ConceptNet assertions row.
    pub fn to_assertion_line(&self, lang: &str) -> String {
        let meta = serde_json::json!({ "weight": self.weight });
        format!(
            "/a/[/r/{rel}/,/c/{lang}/{h}/,/c/{lang}/{t}/]\t/r/{rel}\t/c/{lang}/{h}\t/c/{lang}/{t}\t{meta}",
            rel = self.relation,
            h = self.head,
            t = self.tail,
        )
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("index metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("index is inconsistent: {0}")]
    Inconsistent(String),
}
