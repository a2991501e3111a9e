use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{KgError, Triple};

pub const DEFAULT_LANGUAGE: &str = "en";

const MAX_REPORTED_ERRORS: usize = 20;

fn parse_err(line: usize, reason: impl Into<String>) -> KgError {
    KgError::Parse {
        line,
        reason: reason.into(),
    }
}

/// `/c/<lang>/<token>[/...]` → (lang, token).
fn split_concept(uri: &str, line: usize) -> Result<(&str, &str), KgError> {
    let mut parts = uri.split('/');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(""), Some("c"), Some(lang), Some(token)) if !lang.is_empty() && !token.is_empty() => {
            Ok((lang, token))
        }
        _ => Err(parse_err(line, format!("malformed concept URI {uri:?}"))),
    }
}

/// Parses one row of a ConceptNet 5 assertions dump. `Ok(None)` marks a row
/// to skip: blank, `#` comment, or an endpoint outside `lang`.
pub fn parse_assertion_line(line: &str, line_no: usize, lang: &str) -> Result<Option<Triple>, KgError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(parse_err(line_no, format!("expected 5 tab-separated fields, found {}", fields.len())));
    }
    let relation = fields[1]
        .strip_prefix("/r/")
        .filter(|r| !r.is_empty() && !r.contains(char::is_whitespace))
        .ok_or_else(|| parse_err(line_no, format!("malformed relation URI {:?}", fields[1])))?;
    let (head_lang, head) = split_concept(fields[2], line_no)?;
    let (tail_lang, tail) = split_concept(fields[3], line_no)?;

    let meta: serde_json::Value =
        serde_json::from_str(fields[4]).map_err(|e| parse_err(line_no, format!("invalid JSON metadata: {e}")))?;
    let meta = meta
        .as_object()
        .ok_or_else(|| parse_err(line_no, "metadata is not a JSON object"))?;
    let weight = match meta.get("weight") {
        None => 1.0,
        Some(w) => w
            .as_f64()
            .filter(|w| w.is_finite() && *w >= 0.0)
            .ok_or_else(|| parse_err(line_no, format!("invalid weight {w}")))?,
    };

    if head_lang != lang || tail_lang != lang {
        return Ok(None);
    }
    let triple = Triple::new(head.to_lowercase(), relation, tail.to_lowercase(), weight);
    triple.validate().map_err(|r| parse_err(line_no, r))?;
    Ok(Some(triple))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub lines: usize,
    pub kept: usize,
    pub skipped: usize,
    pub errors: usize,
    /// The first few error messages, for diagnostics.
    pub first_errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub triples: Vec<Triple>,
    pub stats: IngestStats,
}

/// Parses a whole dump, counting and skipping malformed rows.
pub fn ingest<R: BufRead>(reader: R, lang: &str) -> Result<Ingested, KgError> {
    let mut triples = Vec::new();
    let mut stats = IngestStats::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        stats.lines += 1;
        match parse_assertion_line(&line, i + 1, lang) {
            Ok(Some(t)) => {
                stats.kept += 1;
                triples.push(t);
            }
            Ok(None) => stats.skipped += 1,
            Err(e) => {
                stats.errors += 1;
                if stats.first_errors.len() < MAX_REPORTED_ERRORS {
                    stats.first_errors.push(e.to_string());
                }
            }
        }
    }
    Ok(Ingested { triples, stats })
}
