use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{KgError, Triple};

/// Immutable concept → triple-id inverted index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptIndex {
    triples: Vec<Triple>,
    by_concept: BTreeMap<String, Vec<usize>>,
    relation_counts: BTreeMap<String, usize>,
}

/// Sidecar written next to the flat triples file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub triples: usize,
    pub concepts: usize,
    pub language: String,
    pub relation_counts: BTreeMap<String, usize>,
    /// Seconds since the Unix epoch; honours `SOURCE_DATE_EPOCH`.
    pub built_at: u64,
}

pub fn build_index(triples: Vec<Triple>) -> ConceptIndex {
    let mut by_concept: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut relation_counts = BTreeMap::new();
    for (id, t) in triples.iter().enumerate() {
        by_concept.entry(t.head.clone()).or_default().push(id);
        if t.tail != t.head {
            by_concept.entry(t.tail.clone()).or_default().push(id);
        }
        *relation_counts.entry(t.relation.clone()).or_insert(0) += 1;
    }
    ConceptIndex {
        triples,
        by_concept,
        relation_counts,
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn build_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

impl ConceptIndex {
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: usize) -> &Triple {
        &self.triples[id]
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Ids of the triples whose head or tail is `concept`, ascending.
    pub fn triples_for(&self, concept: &str) -> &[usize] {
        self.by_concept.get(concept).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.by_concept.keys().map(String::as_str)
    }

    pub fn concept_count(&self) -> usize {
        self.by_concept.len()
    }

    pub fn relation_counts(&self) -> &BTreeMap<String, usize> {
        &self.relation_counts
    }

    pub fn triples_path(prefix: impl AsRef<Path>) -> PathBuf {
        with_suffix(prefix.as_ref(), ".triples.tsv")
    }

    pub fn meta_path(prefix: impl AsRef<Path>) -> PathBuf {
        with_suffix(prefix.as_ref(), ".meta.json")
    }

    pub fn meta(&self, language: &str) -> IndexMeta {
        self.meta_at(language, build_time())
    }

    fn meta_at(&self, language: &str, built_at: u64) -> IndexMeta {
        IndexMeta {
            triples: self.len(),
            concepts: self.concept_count(),
            language: language.to_string(),
            relation_counts: self.relation_counts.clone(),
            built_at,
        }
    }

    /// Writes `<prefix>.triples.tsv` and `<prefix>.meta.json`.
    pub fn save(&self, prefix: impl AsRef<Path>, language: &str) -> Result<IndexMeta, KgError> {
        self.save_at(prefix, language, build_time())
    }

    /// [`save`](Self::save) with an explicit build timestamp.
    pub fn save_at(&self, prefix: impl AsRef<Path>, language: &str, built_at: u64) -> Result<IndexMeta, KgError> {
        let prefix = prefix.as_ref();
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(Self::triples_path(prefix))?);
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}\t{}", t.head, t.relation, t.tail, t.weight)?;
        }
        w.flush()?;
        let meta = self.meta_at(language, built_at);
        fs::write(Self::meta_path(prefix), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(meta)
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<(Self, IndexMeta), KgError> {
        let prefix = prefix.as_ref();
        let meta: IndexMeta = serde_json::from_str(&fs::read_to_string(Self::meta_path(prefix))?)?;
        let reader = BufReader::new(File::open(Self::triples_path(prefix))?);
        let mut triples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |reason: String| KgError::Parse { line: i + 1, reason };
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let weight: f64 = f[3].parse().map_err(|_| bad(format!("bad weight {:?}", f[3])))?;
            let t = Triple::new(f[0], f[1], f[2], weight);
            t.validate().map_err(bad)?;
            triples.push(t);
        }
        if triples.len() != meta.triples {
            return Err(KgError::Inconsistent(format!(
                "metadata lists {} triples, file has {}",
                meta.triples,
                triples.len()
            )));
        }
        Ok((build_index(triples), meta))
    }
}
